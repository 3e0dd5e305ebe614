//! Synthetic rectangle-detection benchmark: scenes, stub encoder, training,
//! evaluation and the files a run leaves behind.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod scene;
pub mod sweep;
pub mod train;

use std::path::Path;

pub use config::RunConfig;
pub use scene::{generate_scene, Scene, SceneSpec};
pub use train::{evaluate, train, train_with, CurvePoint, EvalReport, Model, TrainResult};

use crate::error::Result;

/// Scene used by `viz` for a given seed.
pub fn viz_scene(config: &RunConfig, scene_seed: u64) -> Result<Scene> {
    generate_scene(&mut scene::scene_rng(scene_seed, 2, 0), &config.scene)
}

/// Traces one scene through `model` and writes its attention maps to `out`.
pub fn visualize(model: &Model, scene_seed: u64, out: &Path) -> Result<artifacts::MapIndex> {
    let scene = viz_scene(&model.config, scene_seed)?;
    let trace = model.forward(&model.params.bind(None), &scene, true)?;
    artifacts::write_attention_maps(out, &scene, scene_seed, &trace.traces)
}
