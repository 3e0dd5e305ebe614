//! Files written by runs: curve CSV, PGM attention maps with a JSON index,
//! walker statistics, evaluation reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::box_agent::WalkerSummary;
use crate::decoder::StageTrace;
use crate::error::{Error, Result};

use super::checkpoint;
use super::scene::Scene;
use super::train::{CurvePoint, TrainResult};

pub const CURVE_HEADER: &str = "epoch,loss,mean_iou,acc50,seconds";

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in curve {
        let _ = writeln!(s, "{},{},{},{},{}", p.epoch, p.loss, p.mean_iou, p.acc50, p.seconds);
    }
    s
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    write(path, curve_csv(curve))
}

/// 8-bit binary PGM of `values` (row-major), min-max scaled; a constant map is mid-gray.
pub fn pgm(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::shape("pgm", &[values.len()], &[height, width]));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let range = hi - lo;
    out.extend(values.iter().map(|v| {
        if range <= f64::EPSILON * hi.abs().max(1e-300) {
            128
        } else {
            ((v - lo) / range * 255.0).round() as u8
        }
    }));
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct MapEntry {
    pub file: String,
    pub spatial_file: String,
    pub query: usize,
    pub stage: usize,
    pub head: usize,
    pub agent_point: [f64; 2],
    pub previous_box: [f64; 4],
    pub current_box: [f64; 4],
}

#[derive(Debug, Clone, Serialize)]
pub struct MapIndex {
    pub scene_seed: u64,
    pub height: usize,
    pub width: usize,
    pub scene_file: String,
    pub target_boxes: Vec<[f64; 4]>,
    pub target_classes: Vec<usize>,
    pub maps: Vec<MapEntry>,
}

/// One PGM per (stage, query, head) for the full and the spatial-only
/// weights, the scene itself, and `index.json`.
pub fn write_attention_maps(dir: &Path, scene: &Scene, scene_seed: u64, traces: &[StageTrace]) -> Result<MapIndex> {
    ensure_dir(dir)?;
    let (h, w) = (scene.height, scene.width);
    write(&dir.join("scene.pgm"), pgm(w, h, &scene.grid)?)?;
    let mut maps = Vec::new();
    for tr in traces {
        for (head, per_query) in tr.weights.iter().enumerate() {
            for (query, weights) in per_query.iter().enumerate() {
                let file = format!("attn_s{}_q{query:02}_h{head}.pgm", tr.stage);
                let spatial_file = format!("spatial_s{}_q{query:02}_h{head}.pgm", tr.stage);
                write(&dir.join(&file), pgm(w, h, weights)?)?;
                write(&dir.join(&spatial_file), pgm(w, h, &tr.spatial_weights[head][query])?)?;
                maps.push(MapEntry {
                    file,
                    spatial_file,
                    query,
                    stage: tr.stage,
                    head,
                    agent_point: tr.agent_points[query][head],
                    previous_box: tr.previous_boxes[query],
                    current_box: tr.boxes[query],
                });
            }
        }
    }
    let index = MapIndex {
        scene_seed,
        height: h,
        width: w,
        scene_file: "scene.pgm".into(),
        target_boxes: scene.targets.boxes.iter().map(|b| b.to_array()).collect(),
        target_classes: scene.targets.classes.clone(),
        maps,
    };
    write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}

pub fn write_walker_stats(path: &Path, summary: &WalkerSummary) -> Result<()> {
    write_json(path, summary)
}

/// Paths of a finished run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub curve: PathBuf,
    pub checkpoint: PathBuf,
    pub eval: PathBuf,
    pub walker_stats: Option<PathBuf>,
}

#[derive(Serialize)]
struct Timing<'a> {
    cumulative_seconds: &'a [f64],
}

/// Writes curve, checkpoint, resolved config, final evaluation, timing and
/// walker statistics (walker modes only) into `dir`.
pub fn write_run(dir: &Path, result: &TrainResult) -> Result<RunFiles> {
    ensure_dir(dir)?;
    let files = RunFiles {
        curve: dir.join("curve.csv"),
        checkpoint: dir.join("checkpoint.bin"),
        eval: dir.join("eval.json"),
        walker_stats: result.final_eval.walker.as_ref().map(|_| dir.join("walker_stats.json")),
    };
    write_curve(&files.curve, &result.curve)?;
    checkpoint::save(&result.model, &files.checkpoint)?;
    write(&dir.join("config.json"), result.model.config.to_json()? + "\n")?;
    write_json(&files.eval, &result.final_eval)?;
    write_json(&dir.join("timing.json"), &Timing { cumulative_seconds: &result.wall_clock })?;
    if let (Some(path), Some(w)) = (&files.walker_stats, &result.final_eval.walker) {
        write_walker_stats(path, w)?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_curve() {
        assert_eq!(curve_csv(&[]), "epoch,loss,mean_iou,acc50,seconds\n");
        let c = curve_csv(&[CurvePoint { epoch: 1, loss: 0.5, mean_iou: 0.25, acc50: 0.0, seconds: 0.0 }]);
        assert_eq!(c.lines().nth(1), Some("1,0.5,0.25,0,0"));
    }

    #[test]
    fn uniform_map_is_gray() {
        let bytes = pgm(3, 2, &[1.0 / 6.0; 6]).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert!(bytes[bytes.len() - 6..].iter().all(|&b| b == 128));
        let bytes = pgm(2, 1, &[0.2, 0.8]).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[0, 255]);
        assert!(pgm(2, 2, &[0.0; 3]).is_err());
    }

    #[test]
    fn unwritable_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, "x").unwrap();
        assert!(ensure_dir(&file.join("sub")).is_err());
    }
}
