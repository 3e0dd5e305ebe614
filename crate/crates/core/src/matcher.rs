//! Minimum-cost bipartite assignment between predictions and targets.

use crate::error::{Error, Result};

/// `predictions x targets` cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub predictions: usize,
    pub targets: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(predictions: usize, targets: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != predictions * targets {
            return Err(Error::shape("cost matrix", &[predictions, targets], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        Ok(Self { predictions, targets, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::invalid("ragged cost matrix"));
        }
        Self::new(rows.len(), t, rows.concat())
    }

    pub fn get(&self, prediction: usize, target: usize) -> f64 {
        self.data[prediction * self.targets + target]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `(prediction, target)` pairs ordered by target.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Sum of the matched costs in target order.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(p, t)| cost.get(p, t)).sum()
    }

    /// Prediction index of each target.
    pub fn prediction_of_target(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(p, _)| p).collect()
    }

    fn sorted(mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_by_key(|&(p, t)| (t, p));
        Self { pairs }
    }
}

/// Shortest-augmenting-path Hungarian method with targets as rows.
///
/// Needs at least as many predictions as targets.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.targets, cost.predictions);
    if m < n {
        return Err(Error::invalid(format!("{m} predictions cannot cover {n} targets")));
    }
    if n == 0 {
        return Ok(Assignment::default());
    }
    let a = |row: usize, col: usize| cost.get(col - 1, row - 1);
    // 1-based potentials; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    Ok(Assignment::sorted(pairs))
}

/// Largest `min(P, T)` accepted by [`brute_force`].
pub const BRUTE_FORCE_MAX: usize = 8;
const BRUTE_FORCE_BUDGET: u64 = 50_000_000;

/// Exhaustive minimum over all injections; ties keep the lexicographically first.
pub fn brute_force(cost: &CostMatrix) -> Result<Assignment> {
    let (p, t) = (cost.predictions, cost.targets);
    let (small, large) = (p.min(t), p.max(t));
    if small > BRUTE_FORCE_MAX {
        return Err(Error::TooLarge(format!("{p}x{t} exceeds {BRUTE_FORCE_MAX} on the short side")));
    }
    let count: u64 = (0..small as u64).map(|i| (large as u64) - i).product();
    if count > BRUTE_FORCE_BUDGET {
        return Err(Error::TooLarge(format!("{count} injections to enumerate")));
    }
    // map each item on the short side to a distinct item on the long side
    let short_is_target = t <= p;
    let at = |s: usize, l: usize| if short_is_target { cost.get(l, s) } else { cost.get(s, l) };
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut chosen = Vec::with_capacity(small);
    let mut used = vec![false; large];
    search(small, large, &at, &mut chosen, &mut used, &mut best);
    let picks = best.map(|(_, c)| c).unwrap_or_default();
    let pairs = picks
        .into_iter()
        .enumerate()
        .map(|(s, l)| if short_is_target { (l, s) } else { (s, l) })
        .collect();
    Ok(Assignment::sorted(pairs))
}

fn search(
    small: usize,
    large: usize,
    at: &dyn Fn(usize, usize) -> f64,
    chosen: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if chosen.len() == small {
        let total: f64 = chosen.iter().enumerate().map(|(s, &l)| at(s, l)).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            *best = Some((total, chosen.clone()));
        }
        return;
    }
    for l in 0..large {
        if !used[l] {
            used[l] = true;
            chosen.push(l);
            search(small, large, at, chosen, used, best);
            chosen.pop();
            used[l] = false;
        }
    }
}
