//! Small layer helpers over named parameters (`{prefix}.w`, `{prefix}.b`).

use crate::error::Result;
use crate::numerics::{Bound, Init, ParamStore, Tensor};

pub fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, din: usize, dout: usize) -> Result<()> {
    store.init(seed, &format!("{prefix}.w"), &[din, dout], Init::Xavier)?;
    store.init(seed, &format!("{prefix}.b"), &[dout], Init::Zeros)
}

/// `x·W + b` over the last axis.
pub fn linear(x: &Tensor, params: &Bound<'_>, prefix: &str) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.w"))?;
    let b = params.get(&format!("{prefix}.b"))?;
    x.matmul(w)?.add(b)
}

/// Layer widths `dims[0] -> dims[1] -> ...`, parameters `{prefix}.{i}`.
pub fn init_mlp(store: &mut ParamStore, seed: u64, prefix: &str, dims: &[usize]) -> Result<()> {
    for (i, pair) in dims.windows(2).enumerate() {
        init_linear(store, seed, &format!("{prefix}.{i}"), pair[0], pair[1])?;
    }
    Ok(())
}

/// ReLU between layers, none after the last.
pub fn mlp(x: &Tensor, params: &Bound<'_>, prefix: &str, layers: usize) -> Result<Tensor> {
    let mut h = x.clone();
    for i in 0..layers {
        h = linear(&h, params, &format!("{prefix}.{i}"))?;
        if i + 1 < layers {
            h = h.relu()?;
        }
    }
    Ok(h)
}
