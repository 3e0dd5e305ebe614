//! Dense `f64` tensors, tape-based reverse-mode differentiation, a
//! finite-difference gradient checker and the Adam optimizer.

mod adam;
mod backward;
mod gradcheck;
mod ops;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptState};
pub use gradcheck::{finite_difference_check, GradCheck};
pub use params::{Bound, Init, Param, ParamStore};
pub use tensor::{Gradients, Tape, Tensor};

pub(crate) use ops::sigmoid as sigmoid_scalar;
pub(crate) use ops::sin_cos;

use crate::error::{Error, Result};

/// Default layer-normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// The primitive set, addressable by value (used by [`apply`]).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MatMul,
    /// `a · bᵀ` over the last two axes of batched operands.
    MatMulNt,
    Softmax,
    LogSoftmax,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    LayerNorm,
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Sum,
    Mean,
    SumLast,
}

impl Primitive {
    pub fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul | Primitive::MatMulNt => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Applies a primitive to its operands, recording on the tape when any operand is tracked.
pub fn apply(op: &Primitive, inputs: &[Tensor]) -> Result<Tensor> {
    if let Some(k) = op.arity() {
        if inputs.len() != k {
            return Err(Error::invalid(format!("{op:?} takes {k} operands, got {}", inputs.len())));
        }
    }
    let x = inputs.first().ok_or_else(|| Error::invalid("no operands"))?;
    match op {
        Primitive::Add => x.add(&inputs[1]),
        Primitive::Sub => x.sub(&inputs[1]),
        Primitive::Mul => x.mul(&inputs[1]),
        Primitive::Div => x.div(&inputs[1]),
        Primitive::MatMul => x.matmul(&inputs[1]),
        Primitive::MatMulNt => x.matmul_nt(&inputs[1]),
        Primitive::Neg => x.neg(),
        Primitive::Softmax => x.softmax(),
        Primitive::LogSoftmax => x.log_softmax(),
        Primitive::Sigmoid => x.sigmoid(),
        Primitive::Tanh => x.tanh(),
        Primitive::Relu => x.relu(),
        Primitive::Abs => x.abs(),
        Primitive::LayerNorm => x.layer_norm(LAYER_NORM_EPS),
        Primitive::Transpose => x.transpose(),
        Primitive::Concat { axis } => {
            let refs: Vec<&Tensor> = inputs.iter().collect();
            Tensor::concat(&refs, *axis)
        }
        Primitive::Slice { axis, start, end } => x.slice(*axis, *start, *end),
        Primitive::Sum => x.sum(),
        Primitive::Mean => x.mean(),
        Primitive::SumLast => x.sum_last(),
    }
}
