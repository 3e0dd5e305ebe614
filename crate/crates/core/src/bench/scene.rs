//! Synthetic rectangle scenes on a token grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCCWH;
use crate::loss::Targets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub classes: usize,
    /// Snap rectangle edges to token boundaries.
    pub snap_to_grid: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            min_objects: 1,
            max_objects: 3,
            min_size: 0.1,
            max_size: 0.5,
            classes: 3,
            snap_to_grid: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("grid must be non-empty"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::invalid(format!(
                "object count range {}..={} is empty or allows zero objects",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::invalid("size range must satisfy 0 < min_size <= max_size"));
        }
        if self.min_size > 1.0 {
            return Err(Error::invalid(format!("min_size {} cannot fit in the unit square", self.min_size)));
        }
        if self.classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Fill value of class `c`: `(c + 1) / classes`.
    pub fn intensity(&self, class: usize) -> f64 {
        (class + 1) as f64 / self.classes as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Row-major `[height, width]` intensities.
    pub grid: Vec<f64>,
    pub targets: Targets,
}

/// Paints rectangles in order; later ones cover earlier ones.
pub fn render(spec: &SceneSpec, targets: &Targets) -> Result<Scene> {
    let (h, w) = (spec.height, spec.width);
    let mut grid = vec![0.0; h * w];
    for (b, &c) in targets.boxes.iter().zip(&targets.classes) {
        if c >= spec.classes {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        let k = b.to_corners();
        for r in 0..h {
            let y = (r as f64 + 0.5) / h as f64;
            if y < k.y0 || y > k.y1 {
                continue;
            }
            for col in 0..w {
                let x = (col as f64 + 0.5) / w as f64;
                if x >= k.x0 && x <= k.x1 {
                    grid[r * w + col] = spec.intensity(c);
                }
            }
        }
    }
    Ok(Scene {
        height: h,
        width: w,
        grid,
        targets: targets.clone(),
    })
}

fn snap(lo: f64, hi: f64, cells: usize) -> (f64, f64) {
    let n = cells as f64;
    let mut a = (lo * n).round();
    let mut b = (hi * n).round();
    if b <= a {
        // keep at least one cell, staying inside the grid
        if a >= n {
            a = n - 1.0;
        }
        b = a + 1.0;
    }
    (a / n, b / n)
}

const MAX_TRIES: usize = 10_000;

/// Draws `K` rectangles with uniform class, size and position, rejecting
/// placements that leave the unit square.
pub fn generate_scene(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let k = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut targets = Targets::default();
    let max_size = spec.max_size.min(1.0);
    for _ in 0..k {
        let class = rng.random_range(0..spec.classes);
        let bw = rng.random_range(spec.min_size..=max_size);
        let bh = rng.random_range(spec.min_size..=max_size);
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let (cx, cy): (f64, f64) = (rng.random(), rng.random());
            if cx - bw / 2.0 >= 0.0 && cx + bw / 2.0 <= 1.0 && cy - bh / 2.0 >= 0.0 && cy + bh / 2.0 <= 1.0 {
                placed = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = placed.unwrap_or((0.5, 0.5));
        let mut b = BoxCCWH::new(cx, cy, bw, bh);
        if spec.snap_to_grid {
            let (x0, x1) = snap(cx - bw / 2.0, cx + bw / 2.0, spec.width);
            let (y0, y1) = snap(cy - bh / 2.0, cy + bh / 2.0, spec.height);
            b = BoxCCWH::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0);
        }
        targets.boxes.push(b);
        targets.classes.push(class);
    }
    render(spec, &targets)
}

/// Scene `index` of a split (0 = train, 1 = eval) under `seed`.
pub fn scene_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 32) | index);
    rng
}

pub fn generate_split(spec: &SceneSpec, seed: u64, split: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64).map(|i| generate_scene(&mut scene_rng(seed, split, i), spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_covered_grid() {
        let spec = SceneSpec::default();
        let targets = Targets {
            boxes: vec![BoxCCWH::new(0.25, 0.5, 0.5, 1.0)],
            classes: vec![2],
        };
        let s = render(&spec, &targets).unwrap();
        let covered = s.grid.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(covered, spec.tokens() / 2);
        assert!(s.grid.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn single_half_size_rectangle() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            min_size: 0.5,
            max_size: 0.5,
            ..SceneSpec::default()
        };
        let s = generate_scene(&mut scene_rng(1, 0, 0), &spec).unwrap();
        assert_eq!(s.targets.len(), 1);
        assert_eq!(s.grid.iter().filter(|&&v| v > 0.0).count(), 144);
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec::default();
        let a = generate_scene(&mut scene_rng(5, 0, 3), &spec).unwrap();
        let b = generate_scene(&mut scene_rng(5, 0, 3), &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&mut scene_rng(5, 0, 4), &spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn boxes_stay_inside() {
        for snap in [true, false] {
            let spec = SceneSpec { snap_to_grid: snap, ..SceneSpec::default() };
            for s in generate_split(&spec, 7, 0, 1000).unwrap() {
                assert!((1..=3).contains(&s.targets.len()));
                for (b, &c) in s.targets.boxes.iter().zip(&s.targets.classes) {
                    let k = b.to_corners();
                    assert!(k.x0 >= 0.0 && k.y0 >= 0.0 && k.x1 <= 1.0 && k.y1 <= 1.0, "{b:?}");
                    assert!(b.w > 0.0 && b.h > 0.0 && c < 3);
                }
            }
        }
    }

    #[test]
    fn rejects_infeasible_specs() {
        let mut rng = scene_rng(0, 0, 0);
        for bad in [
            SceneSpec { min_size: 1.5, max_size: 2.0, ..SceneSpec::default() },
            SceneSpec { min_objects: 0, ..SceneSpec::default() },
            SceneSpec { min_objects: 4, max_objects: 3, ..SceneSpec::default() },
            SceneSpec { classes: 0, ..SceneSpec::default() },
        ] {
            assert!(generate_scene(&mut rng, &bad).is_err());
        }
    }

    #[test]
    fn intensities_are_distinct() {
        let spec = SceneSpec { classes: 5, ..SceneSpec::default() };
        let v: Vec<f64> = (0..5).map(|c| spec.intensity(c)).collect();
        assert!(v.windows(2).all(|w| w[0] < w[1]) && v[0] > 0.0);
    }
}
