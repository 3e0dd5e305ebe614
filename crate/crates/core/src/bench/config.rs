use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::numerics::AdamConfig;

use super::scene::SceneSpec;

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub decoder: DecoderConfig,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    /// Add the self-attention layer to the stub encoder.
    pub encoder_layer: bool,
    pub epochs: usize,
    /// Epochs trained at the full learning rate; later epochs use a tenth of it.
    pub lr_drop: Option<usize>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Scenes per optimizer step (gradients are averaged).
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Parameter initialization and shuffling.
    pub seed: u64,
    /// Train/eval scene generation.
    pub scene_seed: u64,
    pub out_dir: PathBuf,
    /// Write measured seconds into the curve instead of 0 (breaks byte-identical curves).
    pub wall_clock_in_curve: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            decoder: DecoderConfig::default(),
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            encoder_layer: false,
            epochs: 60,
            lr_drop: Some(40),
            train_scenes: 200,
            eval_scenes: 50,
            batch_size: 1,
            grad_clip: Some(1.0),
            seed: 0,
            scene_seed: 1234,
            out_dir: PathBuf::from("runs/default"),
            wall_clock_in_curve: false,
        }
    }
}

impl RunConfig {
    /// The reference benchmark: 24x24 tokens, D=64, 8 heads, 3 stages,
    /// 16 queries, 3 classes, 1-3 rectangles of size 0.1-0.5, 200/50 scenes,
    /// 60 epochs, lr 1e-3 dropped to 1e-4 after epoch 40.
    pub fn reference() -> Self {
        Self::default()
    }

    /// Small model used by gradient checks and smoke tests. Box logits are
    /// not detached between stages, so the analytic gradient is the true one.
    pub fn mini() -> Self {
        Self {
            scene: SceneSpec {
                height: 6,
                width: 6,
                max_objects: 2,
                min_size: 0.2,
                max_size: 0.6,
                classes: 2,
                ..SceneSpec::default()
            },
            decoder: DecoderConfig {
                stages: 2,
                queries: 4,
                dim: 32,
                heads: 4,
                classes: 2,
                detach_boxes: false,
                ..DecoderConfig::default()
            },
            epochs: 2,
            train_scenes: 4,
            eval_scenes: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.decoder.validate()?;
        if self.decoder.classes != self.scene.classes {
            return Err(Error::invalid(format!(
                "decoder has {} classes, scenes have {}",
                self.decoder.classes, self.scene.classes
            )));
        }
        if self.scene.max_objects > self.decoder.queries {
            return Err(Error::invalid(format!(
                "{} queries cannot cover {} objects",
                self.decoder.queries, self.scene.max_objects
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let c = RunConfig::reference();
        assert_eq!((c.scene.height, c.scene.width), (24, 24));
        assert_eq!((c.decoder.dim, c.decoder.heads, c.decoder.stages, c.decoder.queries), (64, 8, 3, 16));
        assert_eq!((c.scene.classes, c.scene.min_objects, c.scene.max_objects), (3, 1, 3));
        assert_eq!((c.scene.min_size, c.scene.max_size), (0.1, 0.5));
        assert_eq!((c.train_scenes, c.eval_scenes, c.epochs), (200, 50, 60));
        assert_eq!(c.optimizer.lr, 1e-3);
        c.validate().unwrap();
        RunConfig::mini().validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = RunConfig::mini();
        let back: RunConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"epochs": 3, "decoder": {"ref_mode": "center"}}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.decoder.dim, 64);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn rejects_inconsistent() {
        let mut c = RunConfig::mini();
        c.decoder.classes = 5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::mini();
        c.scene.max_objects = 9;
        assert!(c.validate().is_err());
    }
}
