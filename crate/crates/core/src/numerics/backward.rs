//! Reverse rules. Each rule adds its contribution into the sinks of the
//! tracked operands (`None` sinks belong to constants and are skipped).

use super::ops::{
    axis_split, for_each_broadcast, gemm, numel, permute_data, sin_cos, sine_frequencies,
};
use super::tensor::{Node, Op};

type Sinks<'a> = &'a mut [Option<Vec<f64>>];

fn sink<'a>(sinks: &'a mut [Option<Vec<f64>>], i: usize) -> Option<&'a mut Vec<f64>> {
    sinks.get_mut(i).and_then(Option::as_mut)
}

/// Elementwise unary rule `dx += g * d(x, y)` with input `x` and output `y`.
fn unary(node: &Node, g: &[f64], sinks: Sinks, d: impl Fn(f64, f64) -> f64) {
    if let Some(s) = sink(sinks, 0) {
        let x = &node.inputs[0].value;
        for i in 0..g.len() {
            s[i] += g[i] * d(x[i], node.value[i]);
        }
    }
}

/// Broadcast binary rule with partials `(da, db)` evaluated at `(a, b)`.
fn binary(node: &Node, g: &[f64], sinks: Sinks, d: impl Fn(f64, f64) -> (f64, f64)) {
    let (ia_in, ib_in) = (&node.inputs[0], &node.inputs[1]);
    let (a, b) = (&ia_in.value, &ib_in.value);
    let (left, right) = sinks.split_at_mut(1);
    let mut sa = left[0].as_mut();
    let mut sb = right[0].as_mut();
    for_each_broadcast(&node.shape, &ia_in.shape, &ib_in.shape, |o, ia, ib| {
        let (da, db) = d(a[ia], b[ib]);
        if let Some(s) = sa.as_deref_mut() {
            s[ia] += g[o] * da;
        }
        if let Some(s) = sb.as_deref_mut() {
            s[ib] += g[o] * db;
        }
    });
}

pub(crate) fn apply(node: &Node, g: &[f64], sinks: Sinks) {
    match &node.op {
        Op::Leaf => {}
        Op::Add => binary(node, g, sinks, |_, _| (1.0, 1.0)),
        Op::Sub => binary(node, g, sinks, |_, _| (1.0, -1.0)),
        Op::Mul => binary(node, g, sinks, |a, b| (b, a)),
        Op::Div => binary(node, g, sinks, |a, b| (1.0 / b, -a / (b * b))),
        Op::Maximum => binary(node, g, sinks, |a, b| if a >= b { (1.0, 0.0) } else { (0.0, 1.0) }),
        Op::Minimum => binary(node, g, sinks, |a, b| if a <= b { (1.0, 0.0) } else { (0.0, 1.0) }),
        Op::Neg => unary(node, g, sinks, |_, _| -1.0),
        Op::Scale(c) => unary(node, g, sinks, |_, _| *c),
        Op::AddScalar(_) => unary(node, g, sinks, |_, _| 1.0),
        Op::Abs => unary(node, g, sinks, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Relu => unary(node, g, sinks, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Sigmoid => unary(node, g, sinks, |_, y| y * (1.0 - y)),
        Op::Tanh => unary(node, g, sinks, |_, y| 1.0 - y * y),
        Op::Logit { eps } => unary(node, g, sinks, |p, _| {
            if p > *eps && p < 1.0 - eps {
                1.0 / (p * (1.0 - p))
            } else {
                0.0
            }
        }),
        Op::Softmax => {
            if let Some(s) = sink(sinks, 0) {
                let d = *node.shape.last().unwrap();
                for ((gr, yr), sr) in g.chunks(d).zip(node.value.chunks(d)).zip(s.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        sr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax => {
            if let Some(s) = sink(sinks, 0) {
                let d = *node.shape.last().unwrap();
                for ((gr, yr), sr) in g.chunks(d).zip(node.value.chunks(d)).zip(s.chunks_mut(d)) {
                    let total: f64 = gr.iter().sum();
                    for i in 0..d {
                        sr[i] += gr[i] - yr[i].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { eps } => {
            if let Some(s) = sink(sinks, 0) {
                let d = *node.shape.last().unwrap();
                let x = &node.inputs[0].value;
                let n = d as f64;
                for ((xr, gr), (yr, sr)) in x
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(node.value.chunks(d).zip(s.chunks_mut(d)))
                {
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for i in 0..d {
                        sr[i] += inv * (gr[i] - g_mean - yr[i] * gy_mean);
                    }
                }
            }
        }
        Op::MatMul => matmul(node, g, sinks),
        Op::MatMulNt => matmul_nt(node, g, sinks),
        Op::Transpose => {
            if let Some(s) = sink(sinks, 0) {
                let r = node.shape.len();
                let mut axes: Vec<usize> = (0..r).collect();
                axes.swap(r - 2, r - 1);
                let (_, back) = permute_data(g, &node.shape, &axes);
                s.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
        }
        Op::Reshape => {
            if let Some(s) = sink(sinks, 0) {
                s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Permute(axes) => {
            if let Some(s) = sink(sinks, 0) {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = permute_data(g, &node.shape, &inverse);
                s.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
        }
        Op::Expand => {
            if let Some(s) = sink(sinks, 0) {
                let in_shape = &node.inputs[0].shape;
                for_each_broadcast(&node.shape, in_shape, &node.shape, |o, ia, _| s[ia] += g[o]);
            }
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0;
            for (k, inp) in node.inputs.iter().enumerate() {
                let w = inp.shape[*axis] * inner;
                if let Some(s) = sink(sinks, k) {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..][..w];
                        s[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                offset += w;
            }
        }
        Op::Slice { axis, start, end } => {
            if let Some(s) = sink(sinks, 0) {
                let (outer, len, inner) = axis_split(&node.inputs[0].shape, *axis);
                let w = (end - start) * inner;
                for o in 0..outer {
                    let dst = &mut s[o * len * inner + start * inner..][..w];
                    dst.iter_mut().zip(&g[o * w..(o + 1) * w]).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::IndexSelect(indices) => {
            if let Some(s) = sink(sinks, 0) {
                let inner = numel(&node.inputs[0].shape[1..]);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut s[i * inner..(i + 1) * inner];
                    dst.iter_mut().zip(&g[r * inner..(r + 1) * inner]).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::GatherLast(indices) => {
            if let Some(s) = sink(sinks, 0) {
                let d = *node.inputs[0].shape.last().unwrap();
                for (r, &i) in indices.iter().enumerate() {
                    s[r * d + i] += g[r];
                }
            }
        }
        Op::Sum => {
            if let Some(s) = sink(sinks, 0) {
                s.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean => {
            if let Some(s) = sink(sinks, 0) {
                let c = g[0] / s.len() as f64;
                s.iter_mut().for_each(|a| *a += c);
            }
        }
        Op::SumLast => {
            if let Some(s) = sink(sinks, 0) {
                let d = *node.inputs[0].shape.last().unwrap();
                for (r, chunk) in s.chunks_mut(d).enumerate() {
                    chunk.iter_mut().for_each(|a| *a += g[r]);
                }
            }
        }
        Op::SineEmbed { dim, temperature } => {
            if let Some(s) = sink(sinks, 0) {
                let freqs = sine_frequencies(*dim, *temperature);
                let x = &node.inputs[0].value;
                let half = dim / 2;
                for (c, &t) in x.iter().enumerate() {
                    // coordinate c = point * 2 + axis
                    let base = (c / 2) * dim + (c % 2) * half;
                    let mut acc = 0.0;
                    for (i, &a) in freqs.iter().enumerate() {
                        let (sn, cs) = sin_cos(a * t);
                        acc += a * (g[base + 2 * i] * cs - g[base + 2 * i + 1] * sn);
                    }
                    s[c] += acc;
                }
            }
        }
        Op::HeadBlocks { heads } => {
            if let Some(s) = sink(sinks, 0) {
                let in_shape = &node.inputs[0].shape;
                let (l, width) = (in_shape[0], in_shape[2]);
                let d = width / heads;
                for h in 0..*heads {
                    for r in 0..l {
                        let base = (r * heads + h) * width + h * d;
                        let src = &g[(h * l + r) * d..][..d];
                        s[base..base + d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}

fn matmul(node: &Node, g: &[f64], sinks: Sinks) {
    let (a, b) = (&node.inputs[0], &node.inputs[1]);
    let (left, right) = sinks.split_at_mut(1);
    if b.shape.len() == 2 {
        let k = b.shape[0];
        let n = b.shape[1];
        let m = a.value.len() / k.max(1);
        // dA = G·Bᵀ, dB = Aᵀ·G
        if let Some(sa) = left[0].as_mut() {
            gemm(m, n, k, g, (n, 1), &b.value, (1, n), sa, true);
        }
        if let Some(sb) = right[0].as_mut() {
            gemm(k, m, n, &a.value, (1, k), g, (n, 1), sb, true);
        }
    } else {
        let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
        let n = b.shape[2];
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            if let Some(sa) = left[0].as_mut() {
                let bi = &b.value[i * k * n..(i + 1) * k * n];
                gemm(m, n, k, gi, (n, 1), bi, (1, n), &mut sa[i * m * k..(i + 1) * m * k], true);
            }
            if let Some(sb) = right[0].as_mut() {
                let ai = &a.value[i * m * k..(i + 1) * m * k];
                gemm(k, m, n, ai, (1, k), gi, (n, 1), &mut sb[i * k * n..(i + 1) * k * n], true);
            }
        }
    }
}

fn matmul_nt(node: &Node, g: &[f64], sinks: Sinks) {
    let (a, b) = (&node.inputs[0], &node.inputs[1]);
    let (left, right) = sinks.split_at_mut(1);
    let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let n = b.shape[1];
    // dA = G·B, dB = Gᵀ·A
    for i in 0..batch {
        let gi = &g[i * m * n..(i + 1) * m * n];
        if let Some(sa) = left[0].as_mut() {
            let bi = &b.value[i * n * k..(i + 1) * n * k];
            gemm(m, n, k, gi, (n, 1), bi, (k, 1), &mut sa[i * m * k..(i + 1) * m * k], true);
        }
        if let Some(sb) = right[0].as_mut() {
            let ai = &a.value[i * m * k..(i + 1) * m * k];
            gemm(n, m, k, gi, (1, n), ai, (k, 1), &mut sb[i * n * k..(i + 1) * n * k], true);
        }
    }
}
