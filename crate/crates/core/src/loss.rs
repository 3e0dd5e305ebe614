//! Set-prediction loss: classification with a "no object" class, L1 and GIoU
//! box terms, matched per stage with the Hungarian method.

use serde::{Deserialize, Serialize};

use crate::decoder::StagePrediction;
use crate::error::{Error, Result};
use crate::geometry::{box_l1, ccwh_to_xyxy, giou, giou_tensor, BoxCCWH};
use crate::matcher::{hungarian, Assignment, CostMatrix};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Cross-entropy weight of predictions matched to nothing.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

/// Ground truth of one scene.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Targets {
    pub boxes: Vec<BoxCCWH>,
    pub classes: Vec<usize>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `class·(−p(class)) + l1·L1 + giou·(1 − GIoU)` for every prediction/target pair.
pub fn matching_cost(boxes: &[BoxCCWH], class_logits: &[Vec<f64>], targets: &Targets, weights: &LossWeights) -> Result<CostMatrix> {
    if boxes.len() != class_logits.len() || targets.boxes.len() != targets.classes.len() {
        return Err(Error::shape("matching_cost", &[boxes.len()], &[class_logits.len()]));
    }
    let mut data = Vec::with_capacity(boxes.len() * targets.len());
    for (b, logits) in boxes.iter().zip(class_logits) {
        let probs = softmax_row(logits);
        for (t, &c) in targets.boxes.iter().zip(&targets.classes) {
            let p = *probs.get(c).ok_or_else(|| Error::invalid(format!("class {c} out of range")))?;
            let g = giou(&b.to_corners(), &t.to_corners());
            data.push(weights.class * -p + weights.l1 * box_l1(b, t) + weights.giou * (1.0 - g));
        }
    }
    CostMatrix::new(boxes.len(), targets.len(), data)
}

/// Hungarian matching of one stage's (detached) predictions.
pub fn match_stage(pred: &StagePrediction, targets: &Targets, weights: &LossWeights) -> Result<Assignment> {
    let boxes: Vec<BoxCCWH> = pred.boxes.data().chunks_exact(4).map(|c| BoxCCWH::new(c[0], c[1], c[2], c[3])).collect();
    let width = *pred.class_logits.shape().last().unwrap_or(&0);
    let logits: Vec<Vec<f64>> = pred.class_logits.data().chunks(width.max(1)).map(<[f64]>::to_vec).collect();
    hungarian(&matching_cost(&boxes, &logits, targets, weights)?)
}

#[derive(Debug, Clone)]
pub struct StageLoss {
    pub total: Tensor,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub assignment: Assignment,
}

/// Loss of one stage under a given assignment.
///
/// Box terms are averaged over targets; cross-entropy is averaged with the
/// per-prediction weights (1 for matched, `no_object` otherwise).
pub fn stage_loss(pred: &StagePrediction, targets: &Targets, assignment: &Assignment, weights: &LossWeights) -> Result<StageLoss> {
    let (n, width) = match pred.class_logits.shape() {
        [n, w] if *w >= 2 => (*n, *w),
        s => return Err(Error::shape("stage_loss", s, &[2])),
    };
    if pred.boxes.shape() != [n, 4] {
        return Err(Error::shape("stage_loss", pred.boxes.shape(), &[n, 4]));
    }
    let no_object = width - 1;
    let mut labels = vec![no_object; n];
    let mut ce_weights = vec![weights.no_object; n];
    for &(p, t) in &assignment.pairs {
        let c = targets.classes[t];
        if c >= no_object {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        labels[p] = c;
        ce_weights[p] = 1.0;
    }
    let norm: f64 = ce_weights.iter().sum();
    let nll = pred.class_logits.log_softmax()?.gather_last(&labels)?.neg()?;
    let ce = nll.mul(&Tensor::new(&[n], ce_weights)?)?.sum()?.scale(1.0 / norm)?;
    let mut total = ce.scale(weights.class)?;
    let (mut l1_value, mut giou_value) = (0.0, 0.0);
    if !assignment.pairs.is_empty() {
        let t = assignment.pairs.len();
        let matched = pred.boxes.index_select(&assignment.prediction_of_target())?;
        let target_boxes: Vec<f64> = assignment.pairs.iter().flat_map(|&(_, t)| targets.boxes[t].to_array()).collect();
        let target_boxes = Tensor::new(&[t, 4], target_boxes)?;
        let l1 = matched.sub(&target_boxes)?.abs()?.sum()?.scale(1.0 / t as f64)?;
        let g = giou_tensor(&ccwh_to_xyxy(&matched)?, &ccwh_to_xyxy(&target_boxes)?)?;
        let giou_term = g.sum()?.neg()?.add_scalar(t as f64)?.scale(1.0 / t as f64)?;
        l1_value = l1.item()?;
        giou_value = giou_term.item()?;
        total = total.add(&l1.scale(weights.l1)?)?.add(&giou_term.scale(weights.giou)?)?;
    }
    Ok(StageLoss {
        class: ce.item()?,
        l1: l1_value,
        giou: giou_value,
        total,
        assignment: assignment.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct SetLoss {
    /// Sum over stages.
    pub total: Tensor,
    pub stages: Vec<StageLoss>,
}

/// Sum of per-stage losses, each stage matched on its own predictions.
pub fn set_loss(stages: &[StagePrediction], targets: &Targets, weights: &LossWeights) -> Result<SetLoss> {
    let assignments = stages
        .iter()
        .map(|s| match_stage(s, targets, weights))
        .collect::<Result<Vec<_>>>()?;
    set_loss_with_assignments(stages, targets, &assignments, weights)
}

/// [`set_loss`] with the matching held fixed.
pub fn set_loss_with_assignments(
    stages: &[StagePrediction],
    targets: &Targets,
    assignments: &[Assignment],
    weights: &LossWeights,
) -> Result<SetLoss> {
    if stages.is_empty() || stages.len() != assignments.len() {
        return Err(Error::invalid("need one assignment per stage"));
    }
    let losses = stages
        .iter()
        .zip(assignments)
        .map(|(s, a)| stage_loss(s, targets, a, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut total = losses[0].total.clone();
    for l in &losses[1..] {
        total = total.add(&l.total)?;
    }
    Ok(SetLoss { total, stages: losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prediction(boxes: &[[f64; 4]], logits: &[Vec<f64>]) -> StagePrediction {
        StagePrediction {
            boxes: Tensor::new(&[boxes.len(), 4], boxes.concat()).unwrap(),
            class_logits: Tensor::from_rows(logits).unwrap(),
            walker: None,
        }
    }

    #[test]
    fn hand_computed_example() {
        let pred = prediction(&[[0.5, 0.5, 0.2, 0.2]], &[vec![0.0, 0.0]]);
        let targets = Targets {
            boxes: vec![BoxCCWH::new(0.5, 0.5, 0.4, 0.4)],
            classes: vec![0],
        };
        let w = LossWeights { class: 0.0, l1: 1.0, giou: 1.0, no_object: 0.1 };
        let loss = set_loss(&[pred], &targets, &w).unwrap();
        assert!((loss.stages[0].l1 - 0.4).abs() < 1e-12);
        assert!((loss.stages[0].giou - 0.75).abs() < 1e-12);
        assert!((loss.total.item().unwrap() - 1.15).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_zero_box_terms() {
        let pred = prediction(&[[0.3, 0.4, 0.2, 0.1], [0.7, 0.7, 0.1, 0.3]], &[vec![0.0, 30.0, 0.0], vec![30.0, 0.0, 0.0]]);
        let targets = Targets {
            boxes: vec![BoxCCWH::new(0.7, 0.7, 0.1, 0.3), BoxCCWH::new(0.3, 0.4, 0.2, 0.1)],
            classes: vec![0, 1],
        };
        let loss = set_loss(&[pred], &targets, &LossWeights::default()).unwrap();
        let s = &loss.stages[0];
        assert_eq!(s.assignment.pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(s.l1, 0.0);
        assert!(s.giou.abs() < 1e-15);
        assert!(s.class < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero() {
        let pred = prediction(&[[0.3, 0.4, 0.2, 0.1]], &[vec![1.0, -1.0]]);
        let targets = Targets { boxes: vec![BoxCCWH::new(0.6, 0.6, 0.3, 0.3)], classes: vec![0] };
        let w = LossWeights { class: 0.0, l1: 0.0, giou: 0.0, no_object: 0.1 };
        assert_eq!(set_loss(&[pred], &targets, &w).unwrap().total.item().unwrap(), 0.0);
    }

    #[test]
    fn empty_targets_supervise_no_object() {
        let pred = prediction(&[[0.3, 0.4, 0.2, 0.1], [0.5, 0.5, 0.5, 0.5]], &[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let loss = set_loss(&[pred], &Targets::default(), &LossWeights::default()).unwrap();
        let s = &loss.stages[0];
        assert!(s.assignment.pairs.is_empty());
        let expected = ((1f64.exp() + 1.0).ln() - 0.0 + (1.0 + 2f64.exp()).ln() - 2.0) / 2.0;
        assert!((s.class - expected).abs() < 1e-12);
        assert!((loss.total.item().unwrap() - 2.0 * expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_more_targets_than_predictions() {
        let pred = prediction(&[[0.3, 0.4, 0.2, 0.1]], &[vec![1.0, 0.0]]);
        let targets = Targets {
            boxes: vec![BoxCCWH::new(0.5, 0.5, 0.1, 0.1); 2],
            classes: vec![0, 0],
        };
        assert!(set_loss(&[pred], &targets, &LossWeights::default()).is_err());
    }

    #[test]
    fn gradient_with_fixed_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let targets = Targets {
            boxes: vec![BoxCCWH::new(0.3, 0.3, 0.2, 0.3), BoxCCWH::new(0.7, 0.6, 0.3, 0.2)],
            classes: vec![1, 0],
        };
        let logits = Tensor::new(&[4, 4], (0..16).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let classes = Tensor::new(&[4, 3], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let build = |p: &[Tensor]| -> Result<Vec<StagePrediction>> {
            Ok(vec![
                StagePrediction { boxes: p[0].sigmoid()?, class_logits: p[1].clone(), walker: None },
                StagePrediction { boxes: p[0].scale(0.5)?.sigmoid()?, class_logits: p[1].scale(2.0)?, walker: None },
            ])
        };
        let w = LossWeights::default();
        let base = build(&[logits.clone(), classes.clone()]).unwrap();
        let assignments: Vec<_> = base.iter().map(|s| match_stage(s, &targets, &w).unwrap()).collect();
        let report = finite_difference_check(
            |p| Ok(set_loss_with_assignments(&build(p)?, &targets, &assignments, &w)?.total),
            &[logits, classes],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
