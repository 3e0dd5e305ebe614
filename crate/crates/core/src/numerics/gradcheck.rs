use crate::error::{Error, Result};

use super::tensor::{Tape, Tensor};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_rel_error: f64,
    /// (parameter index, entry index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Checks `loss_fn`'s tape gradient against central finite differences at
/// every entry of every tensor in `params`.
///
/// `loss_fn` is called once with tracked leaves and `2 * entries + 2` times
/// with plain tensors, so it must not depend on anything but its arguments.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step {eps} must be positive")));
    }
    let tape = Tape::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = loss_fn(&leaves)?;
    let grads = loss.backward()?;

    let mut plain: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    let first = loss_fn(&plain)?.item()?;
    let second = loss_fn(&plain)?.item()?;
    if first.to_bits() != second.to_bits() || first.to_bits() != loss.item()?.to_bits() {
        return Err(Error::Inconsistent { first, second });
    }

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf);
        let base = params[pi].to_vec();
        for ei in 0..base.len() {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[ei] += delta;
                plain[pi] = Tensor::new(params[pi].shape(), v)?;
                loss_fn(&plain)?.item()
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[ei] - numeric).abs() / numeric.abs().max(1.0);
            report.entries += 1;
            if err > report.max_rel_error || report.entries == 1 {
                report.max_rel_error = err;
                report.worst = (pi, ei);
                report.analytic = analytic[ei];
                report.numeric = numeric;
            }
        }
        plain[pi] = params[pi].detach();
    }
    Ok(report)
}
