//! Forward rules for every tape primitive.

use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::tensor::{record, Op, Tensor};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

fn is_suffix(s: &[usize], out: &[usize]) -> bool {
    let s = strip_leading_ones(s);
    s.len() <= out.len() && s == &out[out.len() - s.len()..]
}

/// Element strides of `shape` aligned to `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits `(out_index, a_index, b_index)` for every element of the broadcast result.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let (na, nb) = (numel(sa), numel(sb));
    if na == n && nb == n && sa == out && sb == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    if na == n && is_suffix(sb, out) && strip_leading_ones(sa) == strip_leading_ones(out) {
        for start in (0..n).step_by(nb) {
            (0..nb).for_each(|j| f(start + j, start + j, j));
        }
        return;
    }
    if nb == n && is_suffix(sa, out) && strip_leading_ones(sb) == strip_leading_ones(out) {
        for start in (0..n).step_by(na) {
            (0..na).for_each(|j| f(start + j, j, start + j));
        }
        return;
    }
    let sta = broadcast_strides(sa, out);
    let stb = broadcast_strides(sb, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sta[d];
            ib += stb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sta[d] * out[d];
            ib -= stb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// `c = a·b (+ c when accumulate)` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the index bounds above hold for every caller; strides fit in isize.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `shape`) into the layout given by `axes`.
pub(crate) fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    // trailing axes left in place are copied as contiguous blocks
    let rank = out_shape.len();
    let mut keep = rank;
    while keep > 0 && axes[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let block: usize = shape[keep..].iter().product();
    let outer = &out_shape[..keep];
    let gather: Vec<usize> = axes[..keep].iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    if block == 0 {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; keep];
    let mut pos = 0usize;
    for _ in 0..src.len() / block {
        out.extend_from_slice(&src[pos..pos + block]);
        for d in (0..keep).rev() {
            idx[d] += 1;
            pos += gather[d];
            if idx[d] < outer[d] {
                break;
            }
            pos -= gather[d] * outer[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sine and cosine as two separate portable calls. `f64::sin_cos` may be
/// fused into one `sincos` libcall depending on inlining, which rounds
/// differently and makes results depend on the build profile.
pub(crate) fn sin_cos(x: f64) -> (f64, f64) {
    (libm::sin(x), libm::cos(x))
}

/// Angular frequencies `2π / temperature^(2i/(dim/2))` for one coordinate.
pub(crate) fn sine_frequencies(dim: usize, temperature: f64) -> Vec<f64> {
    let half = dim / 2;
    (0..dim / 4)
        .map(|i| 2.0 * PI / temperature.powf(2.0 * i as f64 / half as f64))
        .collect()
}

impl Tensor {
    fn binary(&self, other: &Tensor, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let out = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::shape(name, &self.shape, &other.shape))?;
        let (a, b) = (&self.data[..], &other.data[..]);
        let v = if self.shape == other.shape {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else if out == self.shape && is_suffix(&other.shape, &out) && !b.is_empty() {
            let mut v = Vec::with_capacity(a.len());
            for chunk in a.chunks_exact(b.len()) {
                v.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            v
        } else if out == other.shape && is_suffix(&self.shape, &out) && !a.is_empty() {
            let mut v = Vec::with_capacity(b.len());
            for chunk in b.chunks_exact(a.len()) {
                v.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            v
        } else {
            let mut v = vec![0.0; numel(&out)];
            for_each_broadcast(&out, &self.shape, &other.shape, |o, ia, ib| v[o] = f(a[ia], b[ib]));
            v
        };
        record(name, op, &[self, other], out, v)
    }

    fn unary(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let v = self.data.iter().map(|&x| f(x)).collect();
        record(name, op, &[self], self.shape.clone(), v)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "maximum", Op::Maximum, f64::max)
    }

    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "minimum", Op::Minimum, f64::min)
    }

    /// Elementwise lower clamp; gradient flows only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Result<Tensor> {
        self.maximum(&Tensor::scalar(floor))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary("neg", Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary("scale", Op::Scale(c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("add_scalar", Op::AddScalar(c), |x| x + c)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary("abs", Op::Abs, f64::abs)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary("tanh", Op::Tanh, f64::tanh)
    }

    /// Clamped inverse sigmoid `ln(p'/(1-p'))`, `p' = clamp(p, eps, 1-eps)`.
    pub fn logit(&self, eps: f64) -> Result<Tensor> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::invalid(format!("logit eps {eps} outside (0, 0.5)")));
        }
        self.unary("logit", Op::Logit { eps }, |p| {
            let p = p.clamp(eps, 1.0 - eps);
            (p / (1.0 - p)).ln()
        })
    }

    fn last_dim(&self, name: &'static str) -> Result<usize> {
        match self.shape.last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::shape(name, &self.shape, &[])),
        }
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        let d = self.last_dim("softmax")?;
        let mut v = self.data.to_vec();
        for row in v.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        record("softmax", Op::Softmax, &[self], self.shape.clone(), v)
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        let d = self.last_dim("log_softmax")?;
        let mut v = self.data.to_vec();
        for row in v.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        record("log_softmax", Op::LogSoftmax, &[self], self.shape.clone(), v)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let d = self.last_dim("layer_norm")?;
        let mut v = self.data.to_vec();
        for row in v.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        record("layer_norm", Op::LayerNorm { eps }, &[self], self.shape.clone(), v)
    }

    /// Matrix product. Supports `[.., m, k] x [k, n]` (shared right operand)
    /// and batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || Error::shape("matmul", &self.shape, &other.shape);
        match (self.rank(), other.rank()) {
            (r, 2) if r >= 2 => {
                let k = self.shape[r - 1];
                if other.shape[0] != k {
                    return Err(err());
                }
                let n = other.shape[1];
                let m = self.numel() / k.max(1);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, false);
                let mut shape = self.shape[..r - 1].to_vec();
                shape.push(n);
                record("matmul", Op::MatMul, &[self, other], shape, out)
            }
            (3, 3) => {
                let (b, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
                if other.shape[0] != b || other.shape[1] != k {
                    return Err(err());
                }
                let n = other.shape[2];
                let mut out = vec![0.0; b * m * n];
                for i in 0..b {
                    gemm(
                        m,
                        k,
                        n,
                        &self.data[i * m * k..(i + 1) * m * k],
                        (k, 1),
                        &other.data[i * k * n..(i + 1) * k * n],
                        (n, 1),
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                record("matmul", Op::MatMul, &[self, other], vec![b, m, n], out)
            }
            _ => Err(err()),
        }
    }

    /// Batched `self · otherᵀ`: `[b, m, k] × [b, n, k] → [b, m, n]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (&[b, m, k], &[b2, n, k2]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(Error::shape("matmul_nt", &self.shape, &other.shape));
        };
        if b != b2 || k != k2 {
            return Err(Error::shape("matmul_nt", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            gemm(
                m,
                k,
                n,
                &self.data[i * m * k..(i + 1) * m * k],
                (k, 1),
                &other.data[i * n * k..(i + 1) * n * k],
                (1, k),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        record("matmul_nt", Op::MatMulNt, &[self, other], vec![b, m, n], out)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        let (shape, v) = permute_data(&self.data, &self.shape, &axes);
        record("transpose", Op::Transpose, &[self], shape, v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        record("reshape", Op::Reshape, &[self], shape.to_vec(), self.data.to_vec())
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if axes.len() != self.rank() || seen.iter().enumerate().any(|(i, &a)| i != a) {
            return Err(Error::shape("permute", &self.shape, axes));
        }
        let (shape, v) = permute_data(&self.data, &self.shape, axes);
        record("permute", Op::Permute(axes.to_vec()), &[self], shape, v)
    }

    /// Broadcasts to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if broadcast_shape(&self.shape, shape).as_deref() != Some(shape) {
            return Err(Error::shape("expand", &self.shape, shape));
        }
        let mut v = vec![0.0; numel(shape)];
        let src = &self.data;
        for_each_broadcast(shape, &self.shape, shape, |o, ia, _| v[o] = src[ia]);
        record("expand", Op::Expand, &[self], shape.to_vec(), v)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", &first.shape, &[axis]));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = axis_split(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut v = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = p.shape[axis] * inner;
                v.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        record("concat", Op::Concat { axis }, parts, shape, v)
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() || start > end || end > self.shape[axis] {
            return Err(Error::shape("slice", &self.shape, &[axis, start, end]));
        }
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut v = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            v.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        record("slice", Op::Slice { axis, start, end }, &[self], shape, v)
    }

    /// Selects rows (axis 0) in the given order.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::shape("index_select", &self.shape, &[]));
        }
        let rows = self.shape[0];
        let inner = numel(&self.shape[1..]);
        let mut v = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(format!("row index {i} out of range {rows}")));
            }
            v.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        record("index_select", Op::IndexSelect(indices.to_vec()), &[self], shape, v)
    }

    /// Picks one entry of the last axis per row: `out[r] = x[r, idx[r]]`.
    pub fn gather_last(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.last_dim("gather_last")?;
        let rows = self.numel() / d;
        if indices.len() != rows || indices.iter().any(|&i| i >= d) {
            return Err(Error::shape("gather_last", &self.shape, &[indices.len()]));
        }
        let v = indices.iter().enumerate().map(|(r, &i)| self.data[r * d + i]).collect();
        record(
            "gather_last",
            Op::GatherLast(indices.to_vec()),
            &[self],
            self.shape[..self.rank() - 1].to_vec(),
            v,
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        record("sum", Op::Sum, &[self], Vec::new(), vec![self.data.iter().sum()])
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::shape("mean", &self.shape, &[]));
        }
        let m = self.data.iter().sum::<f64>() / self.numel() as f64;
        record("mean", Op::Mean, &[self], Vec::new(), vec![m])
    }

    /// Sums away the last axis.
    pub fn sum_last(&self) -> Result<Tensor> {
        let d = self.last_dim("sum_last")?;
        let v = self.data.chunks(d).map(|r| r.iter().sum()).collect();
        record("sum_last", Op::SumLast, &[self], self.shape[..self.rank() - 1].to_vec(), v)
    }

    /// 2-D sinusoidal embedding of the points in the last axis (`[.., 2] -> [.., dim]`).
    ///
    /// Per coordinate the output holds `dim/4` interleaved `(sin, cos)` pairs;
    /// the x-part precedes the y-part.
    pub fn sine_embed(&self, dim: usize, temperature: f64) -> Result<Tensor> {
        if dim == 0 || dim % 4 != 0 {
            return Err(Error::invalid(format!("embedding width {dim} not divisible by 4")));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("temperature {temperature} must be positive")));
        }
        if self.shape.last() != Some(&2) {
            return Err(Error::shape("sine_embed", &self.shape, &[2]));
        }
        let freqs = sine_frequencies(dim, temperature);
        let points = self.numel() / 2;
        let mut v = Vec::with_capacity(points * dim);
        for p in self.data.chunks(2) {
            for &t in p {
                for &a in &freqs {
                    let (s, c) = sin_cos(a * t);
                    v.push(s);
                    v.push(c);
                }
            }
        }
        let mut shape = self.shape[..self.rank() - 1].to_vec();
        shape.push(dim);
        record("sine_embed", Op::SineEmbed { dim, temperature }, &[self], shape, v)
    }

    /// From `[l, heads, heads * d]` keeps head `h`'s own channel block of
    /// row `h`, giving `[heads, l, d]`.
    pub fn head_blocks(&self, heads: usize) -> Result<Tensor> {
        if self.rank() != 3 || self.shape[1] != heads || heads == 0 || self.shape[2] % heads != 0 {
            return Err(Error::shape("head_blocks", &self.shape, &[heads]));
        }
        let (l, width) = (self.shape[0], self.shape[2]);
        let d = width / heads;
        let mut v = Vec::with_capacity(heads * l * d);
        for h in 0..heads {
            for r in 0..l {
                let base = (r * heads + h) * width + h * d;
                v.extend_from_slice(&self.data[base..base + d]);
            }
        }
        record("head_blocks", Op::HeadBlocks { heads }, &[self], vec![heads, l, d], v)
    }
}
