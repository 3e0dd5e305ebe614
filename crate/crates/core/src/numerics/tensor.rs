use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::backward;

/// Dense row-major array of `f64` with an optional link into a [`Tape`].
///
/// Tensors are immutable. Operations on untracked tensors produce untracked
/// tensors; as soon as one operand is tracked the result is recorded on that
/// operand's tape.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl Tensor {
    /// Builds an untracked tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("new"));
        }
        Ok(Self::from_raw(shape.to_vec(), data))
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(Vec::new(), vec![value])
    }

    /// Row-major 2-D constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_raw(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", &self.shape, &[1]));
        }
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Row `i` of a 2-D tensor as a plain slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn backward(&self) -> Result<Gradients> {
        match &self.node {
            Some(node) => node.tape.backward(self),
            None => Err(Error::Untracked),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.is_tracked())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Abs,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    LogSoftmax,
    LayerNorm { eps: f64 },
    MatMul,
    MatMulNt,
    Transpose,
    Reshape,
    Permute(Vec<usize>),
    Expand,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    IndexSelect(Vec<usize>),
    GatherLast(Vec<usize>),
    Sum,
    Mean,
    SumLast,
    SineEmbed { dim: usize, temperature: f64 },
    Logit { eps: f64 },
    HeadBlocks { heads: usize },
}

pub(crate) struct Operand {
    pub(crate) id: Option<usize>,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Rc<Vec<f64>>,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Operand>,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Rc<Vec<f64>>,
}

/// Append-only record of one forward pass.
///
/// Node ids are assigned in creation order, so iterating ids in reverse is a
/// valid reverse topological order.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Registers `value` as a differentiable leaf (a parameter or input).
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: value.shape.clone(),
            value: value.data.clone(),
        });
        Tensor {
            shape: value.shape.clone(),
            data: value.data.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Gradient of the scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot(root.shape.clone()));
        }
        let root_id = match &root.node {
            Some(n) if n.tape.same(self) => n.id,
            Some(_) => return Err(Error::TapeMismatch),
            None => return Err(Error::Untracked),
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root_id] = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.op != Op::Leaf {
                let mut sinks: Vec<Option<Vec<f64>>> = node
                    .inputs
                    .iter()
                    .map(|inp| inp.id.map(|_| vec![0.0; inp.value.len()]))
                    .collect();
                backward::apply(node, &g, &mut sinks);
                for (inp, sink) in node.inputs.iter().zip(sinks) {
                    if let (Some(pid), Some(s)) = (inp.id, sink) {
                        match &mut grads[pid] {
                            Some(acc) => acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(s),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.clone(),
            grads,
        })
    }
}

pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tracked tensor, if any path reached it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node.as_ref()?;
        if !node.tape.same(&self.tape) {
            return None;
        }
        self.grads.get(node.id)?.as_deref()
    }

    /// Like [`Gradients::get`] but untouched tensors get exact zeros.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

/// Records the result of an op. Untracked operands are stored by value only
/// when some operand is tracked.
pub(crate) fn record(
    name: &'static str,
    op: Op,
    inputs: &[&Tensor],
    shape: Vec<usize>,
    value: Vec<f64>,
) -> Result<Tensor> {
    if !value.chunks(16).all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite())) {
        return Err(Error::NonFinite(name));
    }
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match tape {
                Some(existing) if !existing.same(&n.tape) => return Err(Error::TapeMismatch),
                _ => tape = Some(&n.tape),
            }
        }
    }
    let data: Rc<Vec<f64>> = value.into();
    let node = match tape {
        None => None,
        Some(tape) => {
            let operands = inputs
                .iter()
                .map(|t| Operand {
                    id: t.node.as_ref().map(|n| n.id),
                    shape: t.shape.clone(),
                    value: t.data.clone(),
                })
                .collect();
            let id = tape.push(Node {
                op,
                inputs: operands,
                shape: shape.clone(),
                value: data.clone(),
            });
            Some(NodeRef {
                tape: tape.clone(),
                id,
            })
        }
    };
    Ok(Tensor { shape, data, node })
}
