//! Stub encoder: each token is a linear map of its 3x3 intensity patch,
//! optionally followed by one self-attention layer.

use crate::attention::{multi_head_attention, sinusoidal_embed, HeadLayout};
use crate::decoder::MemoryTokens;
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Bound, Init, ParamStore, Tensor, LAYER_NORM_EPS};

use super::scene::Scene;

pub const PATCH: usize = 9;

/// `[tokens, 9]` neighborhoods, zero outside the grid.
pub fn patches(scene: &Scene) -> Result<Tensor> {
    let (h, w) = (scene.height, scene.width);
    if scene.grid.len() != h * w {
        return Err(Error::shape("patches", &[scene.grid.len()], &[h, w]));
    }
    let mut out = Vec::with_capacity(h * w * PATCH);
    for r in 0..h as isize {
        for c in 0..w as isize {
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    let inside = rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize;
                    out.push(if inside { scene.grid[rr as usize * w + cc as usize] } else { 0.0 });
                }
            }
        }
    }
    Tensor::new(&[h * w, PATCH], out)
}

/// Sinusoidal embeddings of the token centers, `[height * width, dim]`.
pub fn token_positions(height: usize, width: usize, dim: usize, temperature: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(height * width * dim);
    for r in 0..height {
        for c in 0..width {
            let x = (c as f64 + 0.5) / width as f64;
            let y = (r as f64 + 0.5) / height as f64;
            data.extend(sinusoidal_embed(x, y, dim, temperature)?.0);
        }
    }
    Tensor::new(&[height * width, dim], data)
}

/// Key positions of a grid, whole and split per head.
#[derive(Debug, Clone)]
pub struct KeyPositions {
    pub full: Tensor,
    pub per_head: Tensor,
}

impl KeyPositions {
    pub fn new(height: usize, width: usize, dim: usize, temperature: f64, heads: usize) -> Result<Self> {
        let full = token_positions(height, width, dim, temperature)?;
        let per_head = HeadLayout::new(dim, heads)?.split(&full)?;
        Ok(Self { full, per_head })
    }

    pub fn heads(&self) -> usize {
        self.per_head.shape()[0]
    }
}

pub fn init_encoder_params(store: &mut ParamStore, seed: u64, dim: usize, with_layer: bool) -> Result<()> {
    nn::init_linear(store, seed, "enc.patch", PATCH, dim)?;
    if with_layer {
        for proj in ["q", "k", "v", "o"] {
            nn::init_linear(store, seed, &format!("enc.layer.{proj}"), dim, dim)?;
        }
        store.init(seed, "enc.layer.norm.g", &[dim], Init::Constant(1.0))?;
        store.init(seed, "enc.layer.norm.b", &[dim], Init::Zeros)?;
    }
    Ok(())
}

/// Memory tokens of one scene.
pub fn encode_scene(scene: &Scene, params: &Bound<'_>, keys: &KeyPositions) -> Result<MemoryTokens> {
    let (positions, heads) = (&keys.full, keys.heads());
    let w = params.get("enc.patch.w")?;
    let dim = w.shape()[1];
    if positions.shape() != [scene.height * scene.width, dim] {
        return Err(Error::shape("encode_scene", positions.shape(), &[scene.height * scene.width, dim]));
    }
    let mut content = nn::linear(&patches(scene)?, params, "enc.patch")?;
    if params.has("enc.layer.q.w") {
        let layout = HeadLayout::new(dim, heads)?;
        let qk = content.add(positions)?;
        let (attn, _) = multi_head_attention(
            &nn::linear(&qk, params, "enc.layer.q")?,
            &nn::linear(&qk, params, "enc.layer.k")?,
            &nn::linear(&content, params, "enc.layer.v")?,
            &layout,
        )?;
        let attn = nn::linear(&attn, params, "enc.layer.o")?;
        content = content
            .add(&attn)?
            .layer_norm(LAYER_NORM_EPS)?
            .mul(params.get("enc.layer.norm.g")?)?
            .add(params.get("enc.layer.norm.b")?)?;
    }
    Ok(MemoryTokens {
        content,
        pos: positions.clone(),
        pos_heads: Some(keys.per_head.clone()),
    })
}
