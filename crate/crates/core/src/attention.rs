//! Sinusoidal position embeddings, the diagonal conditional projection,
//! decomposed content + spatial cross-attention and width/height modulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Bound, ParamStore, Tensor};

/// Default embedding temperature.
pub const DEFAULT_TEMPERATURE: f64 = 20.0;

/// A 2-D sinusoidal embedding: x-part then y-part, each `dim/4` (sin, cos) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbed(pub Vec<f64>);

impl PosEmbed {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &PosEmbed) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn x_part(&self) -> &[f64] {
        &self.0[..self.0.len() / 2]
    }

    pub fn y_part(&self) -> &[f64] {
        &self.0[self.0.len() / 2..]
    }
}

/// Embeds a point in `[0,1]^2`.
///
/// Per coordinate `t` and pair `i`, the entries are `sin(2πt/ω_i)` and
/// `cos(2πt/ω_i)` with `ω_i = temperature^(2i/(dim/2))`.
pub fn sinusoidal_embed(x: f64, y: f64, dim: usize, temperature: f64) -> Result<PosEmbed> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::invalid(format!("embedding width {dim} not divisible by 4")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for t in [x, y] {
        for i in 0..dim / 4 {
            let omega = temperature.powf(2.0 * i as f64 / half as f64);
            let arg = 2.0 * std::f64::consts::PI * t / omega;
            let (s, c) = crate::numerics::sin_cos(arg);
            v.push(s);
            v.push(c);
        }
    }
    Ok(PosEmbed(v))
}

/// Heads and per-head channel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub heads: usize,
    pub dim: usize,
}

impl HeadLayout {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self { heads, dim })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[l, dim] -> [heads, l, head_dim]`.
    pub fn split(&self, x: &Tensor) -> Result<Tensor> {
        let l = self.rows(x)?;
        x.reshape(&[l, self.heads, self.head_dim()])?.permute(&[1, 0, 2])
    }

    /// `[heads, l, head_dim] -> [l, dim]`.
    pub fn merge(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.heads || s[2] != self.head_dim() {
            return Err(Error::shape("merge_heads", s, &[self.heads, self.head_dim()]));
        }
        let l = s[1];
        x.permute(&[1, 0, 2])?.reshape(&[l, self.dim])
    }

    fn rows(&self, x: &Tensor) -> Result<usize> {
        match x.shape() {
            [l, d] if *d == self.dim => Ok(*l),
            s => Err(Error::shape("split_heads", s, &[self.dim])),
        }
    }
}

/// Parameters of the FFN producing the diagonal of the conditional projection.
pub fn init_lambda_params(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize) -> Result<()> {
    nn::init_mlp(store, seed, prefix, &[dim, dim, dim])
}

/// `λ_q = FFN(f)`: two layers `dim -> dim -> dim` with a ReLU between.
pub fn lambda_from_embedding(f: &Tensor, params: &Bound<'_>, prefix: &str) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.0.w"))?;
    if f.shape().last() != w.shape().first() {
        return Err(Error::shape("lambda_from_embedding", f.shape(), w.shape()));
    }
    nn::mlp(f, params, prefix, 2)
}

/// `λ_q ⊙ p_ref`; the trailing widths must agree.
pub fn conditional_spatial_query(lambda: &Tensor, p_ref: &Tensor) -> Result<Tensor> {
    if lambda.shape().last() != p_ref.shape().last() {
        return Err(Error::shape("conditional_spatial_query", lambda.shape(), p_ref.shape()));
    }
    p_ref.mul(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WhMode {
    #[default]
    Off,
    /// x/y terms scaled by `w_ref / w_q` and `h_ref / h_q`.
    Original,
    /// x/y terms scaled by `2 w_ref` and `2 h_ref`.
    ScaleFree,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulationFactors {
    pub w_ref: f64,
    pub h_ref: f64,
    pub w_q: f64,
    pub h_q: f64,
    pub mode: WhMode,
}

impl ModulationFactors {
    /// Multipliers for the x and y terms.
    pub fn scales(&self) -> Result<(f64, f64)> {
        match self.mode {
            WhMode::Off => Ok((1.0, 1.0)),
            WhMode::Original => {
                if !(self.w_q.is_finite() && self.h_q.is_finite()) {
                    return Err(Error::NonFinite("wh_modulate"));
                }
                let w_q = self.w_q.max(crate::geometry::MIN_BOX_SIZE);
                let h_q = self.h_q.max(crate::geometry::MIN_BOX_SIZE);
                if !(w_q > 0.0 && h_q > 0.0) {
                    return Err(Error::invalid("box width/height must be positive"));
                }
                Ok((self.w_ref / w_q, self.h_ref / h_q))
            }
            WhMode::ScaleFree => Ok((2.0 * self.w_ref, 2.0 * self.h_ref)),
        }
    }
}

/// Modulated spatial logit from separated x/y inner products, divided by `√dim`.
pub fn wh_modulate(x_term: f64, y_term: f64, factors: &ModulationFactors, dim: usize) -> Result<f64> {
    let norm = (dim as f64).sqrt();
    Ok(match factors.mode {
        WhMode::Off => (x_term + y_term) / norm,
        WhMode::Original => {
            let (fx, fy) = factors.scales()?;
            (x_term * fx + y_term * fy) / norm
        }
        WhMode::ScaleFree => 2.0 * (x_term * factors.w_ref + y_term * factors.h_ref) / norm,
    })
}

/// Tensor form of the modulation multipliers for `[n]` queries.
pub fn wh_factors(w_ref: &Tensor, h_ref: &Tensor, w_q: &Tensor, h_q: &Tensor, mode: WhMode) -> Result<(Tensor, Tensor)> {
    match mode {
        WhMode::Off => Ok((Tensor::ones(w_ref.shape()), Tensor::ones(h_ref.shape()))),
        WhMode::Original => {
            if w_q.data().iter().chain(h_q.data()).any(|&v| v <= 0.0) {
                return Err(Error::invalid("box width/height must be positive"));
            }
            Ok((w_ref.div(w_q)?, h_ref.div(h_q)?))
        }
        WhMode::ScaleFree => Ok((w_ref.scale(2.0)?, h_ref.scale(2.0)?)),
    }
}

/// Scales the x-half of `[l, p, dim]` embeddings by `fx[l]` and the y-half by `fy[l]`.
pub fn modulate_embedding(emb: &Tensor, fx: &Tensor, fy: &Tensor) -> Result<Tensor> {
    let s = emb.shape();
    if s.len() != 3 || fx.shape() != [s[0]] || fy.shape() != [s[0]] {
        return Err(Error::shape("modulate_embedding", s, fx.shape()));
    }
    let half = s[2] / 2;
    let x = emb.slice(2, 0, half)?.mul(&fx.reshape(&[s[0], 1, 1])?)?;
    let y = emb.slice(2, half, s[2])?.mul(&fy.reshape(&[s[0], 1, 1])?)?;
    Tensor::concat(&[&x, &y], 2)
}

/// Spatial query: one shared `[n, dim]` embedding, or per-head `[heads, n, head_dim]` slices.
#[derive(Debug, Clone)]
pub enum SpatialQuery {
    Shared(Tensor),
    PerHead(Tensor),
}

pub struct CrossAttentionInput<'a> {
    /// `[n, dim]`
    pub content_q: &'a Tensor,
    /// `[k, dim]`
    pub content_k: &'a Tensor,
    pub spatial_q: SpatialQuery,
    /// `[k, dim]`, or already split into `[heads, k, head_dim]`.
    pub spatial_k: &'a Tensor,
    /// `[k, dim]`
    pub values: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[n, dim]`, heads concatenated (and projected when a projection was given).
    pub output: Tensor,
    /// `[heads, n, k]` softmax weights.
    pub weights: Tensor,
    /// `[heads, n, k]` spatial logit term `p_qᵀp_k` (unscaled).
    pub spatial_logits: Tensor,
}

/// Logit scale for a per-head query of width `2 * head_dim`.
pub fn logit_scale(layout: &HeadLayout) -> f64 {
    1.0 / ((2 * layout.head_dim()) as f64).sqrt()
}

/// Per head: `softmax((c_qᵀc_k + p_qᵀp_k) / √(2 d_h)) · v`, heads concatenated
/// and optionally projected by `(w, b)`.
pub fn cross_attention(
    input: &CrossAttentionInput<'_>,
    layout: &HeadLayout,
    out_proj: Option<(&Tensor, &Tensor)>,
) -> Result<AttentionOutput> {
    let pq = match &input.spatial_q {
        SpatialQuery::Shared(t) => layout.split(t)?,
        SpatialQuery::PerHead(t) => {
            let s = t.shape();
            if s.len() != 3 || s[0] != layout.heads {
                return Err(Error::invalid(format!(
                    "spatial query has shape {s:?}, layout expects {} heads",
                    layout.heads
                )));
            }
            t.clone()
        }
    };
    let cq = layout.split(input.content_q)?;
    let ck = layout.split(input.content_k)?;
    let pk = if input.spatial_k.rank() == 3 {
        input.spatial_k.clone()
    } else {
        layout.split(input.spatial_k)?
    };
    let v = layout.split(input.values)?;
    if pq.shape() != cq.shape() || pk.shape() != ck.shape() || v.shape() != ck.shape() {
        return Err(Error::shape("cross_attention", pq.shape(), cq.shape()));
    }
    let content = cq.matmul_nt(&ck)?;
    let spatial = pq.matmul_nt(&pk)?;
    let logits = content.add(&spatial)?.scale(logit_scale(layout))?;
    let weights = logits.softmax()?;
    let mut output = layout.merge(&weights.matmul(&v)?)?;
    if let Some((w, b)) = out_proj {
        output = output.matmul(w)?.add(b)?;
    }
    Ok(AttentionOutput {
        output,
        weights,
        spatial_logits: spatial,
    })
}

/// Plain scaled dot-product multi-head attention over already projected `q, k, v`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, layout: &HeadLayout) -> Result<(Tensor, Tensor)> {
    let (qh, kh, vh) = (layout.split(q)?, layout.split(k)?, layout.split(v)?);
    let scale = 1.0 / (layout.head_dim() as f64).sqrt();
    let weights = qh.matmul_nt(&kh)?.scale(scale)?.softmax()?;
    Ok((layout.merge(&weights.matmul(&vh)?)?, weights))
}
