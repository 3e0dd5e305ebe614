//! Model assembly, training loop and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::box_agent::{WalkerStats, WalkerSummary};
use crate::decoder::{forward, init_decoder_params, DecoderOutput};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCCWH};
use crate::loss::{match_stage, set_loss, set_loss_with_assignments, SetLoss};
use crate::matcher::Assignment;
use crate::numerics::{adam_step, Bound, OptState, ParamStore, Tape};

use super::config::RunConfig;
use super::encoder::{encode_scene, init_encoder_params, KeyPositions};
use super::scene::{generate_split, Scene};

/// Parameters plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParamStore,
    positions: KeyPositions,
}

impl Model {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_encoder_params(&mut params, config.seed, config.decoder.dim, config.encoder_layer)?;
        init_decoder_params(&config.decoder, config.seed, &mut params)?;
        let positions = KeyPositions::new(
            config.scene.height,
            config.scene.width,
            config.decoder.dim,
            config.decoder.temperature,
            config.decoder.heads,
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            positions,
        })
    }

    /// Rebuilds the model for `config` and replaces its values with `params`,
    /// which must have exactly the same names and shapes.
    pub fn with_params(config: &RunConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model has {}",
                params.len(),
                model.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            let src = params
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::Checkpoint(format!("{}: shape {:?}, expected {:?}", p.name, src.shape, p.shape)));
            }
            p.values.clone_from(&src.values);
        }
        Ok(model)
    }

    pub fn forward(&self, params: &Bound<'_>, scene: &Scene, trace: bool) -> Result<DecoderOutput> {
        let memory = encode_scene(scene, params, &self.positions)?;
        forward(&memory, &self.config.decoder, params, trace)
    }

    /// Full loss of one scene; `fixed` holds the matching constant.
    pub fn scene_loss(&self, params: &Bound<'_>, scene: &Scene, fixed: Option<&[Assignment]>) -> Result<SetLoss> {
        let out = self.forward(params, scene, false)?;
        match fixed {
            Some(a) => set_loss_with_assignments(&out.stages, &scene.targets, a, &self.config.loss),
            None => set_loss(&out.stages, &scene.targets, &self.config.loss),
        }
    }

    /// Per-stage matchings of the current predictions.
    pub fn assignments(&self, scene: &Scene) -> Result<Vec<Assignment>> {
        let out = self.forward(&self.params.bind(None), scene, false)?;
        out.stages
            .iter()
            .map(|s| match_stage(s, &scene.targets, &self.config.loss))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub mean_iou: f64,
    pub acc50: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub targets: usize,
    /// Mean IoU of matched final-stage predictions over all targets.
    pub mean_iou: f64,
    /// Fraction of targets whose match has IoU >= 0.5 and the right class.
    pub acc50: f64,
    pub stage_mean_iou: Vec<f64>,
    pub walker: Option<WalkerSummary>,
}

/// Matched IoU and accuracy of the final stage, plus per-stage IoU.
pub fn evaluate(model: &Model, scenes: &[Scene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to evaluate"));
    }
    let bound = model.params.bind(None);
    let stages = model.config.decoder.stages;
    let mut stage_iou = vec![0.0; stages];
    let (mut hits, mut targets) = (0usize, 0usize);
    let mut walker = model
        .config
        .decoder
        .ref_mode
        .uses_walker()
        .then(|| WalkerStats::new(model.config.decoder.ref_mode));
    for scene in scenes {
        let out = model.forward(&bound, scene, false)?;
        targets += scene.targets.len();
        for (s, pred) in out.stages.iter().enumerate() {
            if let (Some(stats), Some(z)) = (walker.as_mut(), pred.walker.as_ref()) {
                stats.record(s, z);
            }
            let a = match_stage(pred, &scene.targets, &model.config.loss)?;
            let width = model.config.decoder.classes + 1;
            for &(p, t) in &a.pairs {
                let b = pred.boxes.row(p);
                let overlap = iou(
                    &BoxCCWH::new(b[0], b[1], b[2], b[3]).to_corners(),
                    &scene.targets.boxes[t].to_corners(),
                );
                stage_iou[s] += overlap;
                if s + 1 == stages {
                    let logits = &pred.class_logits.data()[p * width..(p + 1) * width];
                    let best = (0..width).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
                    if overlap >= 0.5 && best == scene.targets.classes[t] {
                        hits += 1;
                    }
                }
            }
        }
    }
    let denom = targets.max(1) as f64;
    let stage_mean_iou: Vec<f64> = stage_iou.iter().map(|v| v / denom).collect();
    Ok(EvalReport {
        scenes: scenes.len(),
        targets,
        mean_iou: *stage_mean_iou.last().expect("at least one stage"),
        acc50: hits as f64 / denom,
        stage_mean_iou,
        walker: walker.map(|w| w.summary()).transpose()?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub curve: Vec<CurvePoint>,
    /// Measured seconds per epoch, cumulative.
    pub wall_clock: Vec<f64>,
    pub model: Model,
    pub final_eval: EvalReport,
}

fn diverged(e: Error, epoch: usize, seed: u64) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch, seed },
        other => other,
    }
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Trains with Adam, evaluating after every epoch. `progress` sees each point.
pub fn train_with(config: &RunConfig, mut progress: impl FnMut(&CurvePoint)) -> Result<TrainResult> {
    let mut model = Model::new(config)?;
    let train_set = generate_split(&config.scene, config.scene_seed, 0, config.train_scenes)?;
    let eval_set = generate_split(&config.scene, config.scene_seed, 1, config.eval_scenes)?;
    let mut opt = OptState::new(config.optimizer, &model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut wall_clock = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let dropped = config.lr_drop.is_some_and(|d| epoch > d);
        opt.config.lr = if dropped { 0.1 * config.optimizer.lr } else { config.optimizer.lr };
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            for &i in batch {
                let tape = Tape::new();
                let bound = model.params.bind(Some(&tape));
                let loss = model
                    .scene_loss(&bound, &train_set[i], None)
                    .map_err(|e| diverged(e, epoch, config.seed))?;
                let value = loss.total.item()?;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, seed: config.seed });
                }
                total += value;
                let g = tape.backward(&loss.total)?;
                for (acc, t) in grads.iter_mut().zip(bound.tensors()) {
                    if let Some(d) = g.get(t) {
                        acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            if let Some(c) = config.grad_clip {
                clip(&mut grads, c);
            }
            adam_step(&mut model.params, &grads, &mut opt)?;
        }
        let report = evaluate(&model, &eval_set).map_err(|e| diverged(e, epoch, config.seed))?;
        let elapsed = start.elapsed().as_secs_f64();
        wall_clock.push(elapsed);
        let point = CurvePoint {
            epoch,
            loss: total / train_set.len().max(1) as f64,
            mean_iou: report.mean_iou,
            acc50: report.acc50,
            seconds: if config.wall_clock_in_curve { elapsed } else { 0.0 },
        };
        progress(&point);
        curve.push(point);
    }
    let final_eval = if eval_set.is_empty() {
        EvalReport {
            scenes: 0,
            targets: 0,
            mean_iou: 0.0,
            acc50: 0.0,
            stage_mean_iou: Vec::new(),
            walker: None,
        }
    } else {
        evaluate(&model, &eval_set)?
    };
    Ok(TrainResult {
        curve,
        wall_clock,
        model,
        final_eval,
    })
}

pub fn train(config: &RunConfig) -> Result<TrainResult> {
    train_with(config, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::scene::{render, SceneSpec};
    use crate::loss::Targets;
    use crate::numerics::finite_difference_check;

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let config = RunConfig { epochs: 0, ..RunConfig::mini() };
        let r = train(&config).unwrap();
        assert!(r.curve.is_empty());
        assert_eq!(r.model.params, Model::new(&config).unwrap().params);
    }

    #[test]
    fn short_runs_are_deterministic() {
        let config = RunConfig::mini();
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.curve.len(), 2);
        assert!(a.curve.iter().all(|p| p.loss.is_finite() && p.seconds == 0.0));
        assert_ne!(a.model.params, Model::new(&config).unwrap().params);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let config = RunConfig::mini();
        let model = Model::new(&config).unwrap();
        let spec = SceneSpec { ..config.scene.clone() };
        let targets = Targets {
            boxes: vec![BoxCCWH::new(0.5, 0.5, 0.5, 0.5)],
            classes: vec![0],
        };
        let scene = render(&spec, &targets).unwrap();
        // untrained model: metrics are defined and bounded
        let r = evaluate(&model, &[scene]).unwrap();
        assert!((0.0..=1.0).contains(&r.mean_iou) && (0.0..=1.0).contains(&r.acc50));
        assert!(r.walker.is_some());
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn full_loss_gradient_with_encoder_layer() {
        let mut config = RunConfig::mini();
        config.encoder_layer = true;
        config.decoder.stages = 1;
        config.decoder.queries = 2;
        config.decoder.dim = 16;
        config.decoder.heads = 2;
        config.scene.height = 4;
        config.scene.width = 4;
        config.scene.max_objects = 1;
        let mut model = Model::new(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in model.params.iter_mut() {
            for v in &mut p.values {
                *v += rand::Rng::random_range(&mut rng, -0.1..0.1);
            }
        }
        let scene = generate_split(&config.scene, 9, 0, 1).unwrap().remove(0);
        let fixed = model.assignments(&scene).unwrap();
        let report = finite_difference_check(
            |p| {
                let bound = model.params.bind_tensors(p.to_vec())?;
                Ok(model.scene_loss(&bound, &scene, Some(&fixed))?.total)
            },
            &model.params.tensors(),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_params_must_match() {
        let config = RunConfig::mini();
        let model = Model::new(&config).unwrap();
        let other = RunConfig {
            decoder: crate::decoder::DecoderConfig { dim: 16, ..config.decoder.clone() },
            ..config.clone()
        };
        assert!(Model::with_params(&other, model.params.clone()).is_err());
        assert!(Model::with_params(&config, model.params.clone()).is_ok());
    }
}
