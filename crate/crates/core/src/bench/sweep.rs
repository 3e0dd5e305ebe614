//! Runs every (mode, seed) pair of a base config and summarizes final metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::box_agent::RefMode;
use crate::error::{Error, Result};

use super::artifacts::{ensure_dir, write_json, write_run};
use super::config::RunConfig;
use super::train::{train_with, CurvePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RefMode,
    pub seed: u64,
    pub final_loss: f64,
    pub mean_iou: f64,
    pub acc50: f64,
    pub stage_mean_iou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub runs: usize,
    pub mean_iou: f64,
    pub acc50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<RunSummary>,
    pub modes: BTreeMap<String, ModeSummary>,
}

impl SweepSummary {
    /// Seed-averaged final IoU of `mode`.
    pub fn mean_iou(&self, mode: RefMode) -> Option<f64> {
        self.modes.get(mode.name()).map(|m| m.mean_iou)
    }

    pub fn run(&self, mode: RefMode, seed: u64) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.mode == mode && r.seed == seed)
    }
}

/// Trains each combination into `out/<mode>/seed<seed>` and writes `summary.json`.
/// `progress` gets `(mode, seed, point)` after every epoch.
pub fn sweep(
    base: &RunConfig,
    modes: &[RefMode],
    seeds: &[u64],
    out: Option<&Path>,
    mut progress: impl FnMut(RefMode, u64, &CurvePoint),
) -> Result<SweepSummary> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one mode and one seed"));
    }
    let mut runs = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let mut config = base.clone();
            config.decoder.ref_mode = mode;
            config.seed = seed;
            if let Some(dir) = out {
                config.out_dir = dir.join(mode.name()).join(format!("seed{seed}"));
            }
            let result = train_with(&config, |p| progress(mode, seed, p))?;
            if out.is_some() {
                write_run(&config.out_dir, &result)?;
            }
            runs.push(RunSummary {
                mode,
                seed,
                final_loss: result.curve.last().map_or(f64::NAN, |p| p.loss),
                mean_iou: result.final_eval.mean_iou,
                acc50: result.final_eval.acc50,
                stage_mean_iou: result.final_eval.stage_mean_iou.clone(),
            });
        }
    }
    let mut modes_out = BTreeMap::new();
    for &mode in modes {
        let of_mode: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == mode).collect();
        let n = of_mode.len() as f64;
        modes_out.insert(
            mode.name().to_string(),
            ModeSummary {
                runs: of_mode.len(),
                mean_iou: of_mode.iter().map(|r| r.mean_iou).sum::<f64>() / n,
                acc50: of_mode.iter().map(|r| r.acc50).sum::<f64>() / n,
            },
        );
    }
    let summary = SweepSummary { runs, modes: modes_out };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(summary)
}
