use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Glorot uniform over the first two extents.
    Xavier,
    Uniform(f64, f64),
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

// FNV-1a, used to give each parameter name its own RNG stream.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape("param", shape, &[values.len()]));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        Ok(())
    }

    /// Inserts a parameter whose values depend only on `(seed, name)`.
    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) -> Result<()> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(name_stream(name));
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Xavier => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Uniform(lo, hi) => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        };
        self.insert(name, shape, values)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn count_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|p| pred(&p.name)).map(|p| p.values.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    /// Sets every parameter whose name satisfies `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut().filter(|p| pred(&p.name)) {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Tensor views of all parameters: tape leaves when `tape` is given,
    /// plain constants otherwise.
    pub fn bind(&self, tape: Option<&Tape>) -> Bound<'_> {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                let t = Tensor::from_raw(p.shape.clone(), p.values.clone());
                match tape {
                    Some(tape) => tape.leaf(&t),
                    None => t,
                }
            })
            .collect();
        Bound { store: self, tensors }
    }

    /// Binds externally supplied tensors (same order as the store).
    pub fn bind_tensors(&self, tensors: Vec<Tensor>) -> Result<Bound<'_>> {
        if tensors.len() != self.params.len() {
            return Err(Error::shape("bind", &[self.params.len()], &[tensors.len()]));
        }
        for (p, t) in self.params.iter().zip(&tensors) {
            if p.shape != t.shape() {
                return Err(Error::shape("bind", &p.shape, t.shape()));
            }
        }
        Ok(Bound { store: self, tensors })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::from_raw(p.shape.clone(), p.values.clone()))
            .collect()
    }
}

/// Parameters bound as tensors for one forward pass.
pub struct Bound<'a> {
    store: &'a ParamStore,
    tensors: Vec<Tensor>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.store
            .position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.position(name).is_some()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}
