//! Box agents: head-specific reference points that condense the previous box.
//!
//! A linear head maps the decoder embedding `f` to a walker `z` of `n x 2`
//! offsets. Each head `i` then gets the agent point
//!
//! ```text
//! b_i = (c_x, c_y) + (z_x · w/2, z_y · h/2)
//! ```
//!
//! so that `z ∈ [-1, 1]^2` sweeps the previous box. The ablation modes swap
//! this map for the box center, a tanh-bounded walker, an unscaled offset,
//! an offset in logit space, or a fixed grid over the box.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{sinusoidal_embed, PosEmbed};
use crate::error::{Error, Result};
use crate::geometry::{inverse_sigmoid, sigmoid, BoxCCWH, INVERSE_SIGMOID_EPS, MIN_BOX_SIZE};
use crate::nn;
use crate::numerics::{Bound, Init, ParamStore, Tensor};

/// How the cross-attention reference point of each head is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefMode {
    /// Box center shared by all heads.
    Center,
    /// Box center with width/height-modulated attention.
    CenterWhm,
    /// `b = c + z ⊙ (w, h)/2`.
    #[default]
    AgentUnnormalized,
    /// `b = c + tanh(z) ⊙ (w, h)/2`.
    AgentTanh,
    /// `b = c + z`.
    AgentNoscale,
    /// `b = σ(σ⁻¹(c) + z)`.
    AgentSigma,
    /// 3x3 grid over the box minus its center; the walker is ignored.
    AgentFixedGrid,
}

impl RefMode {
    pub const ALL: [RefMode; 7] = [
        RefMode::Center,
        RefMode::CenterWhm,
        RefMode::AgentUnnormalized,
        RefMode::AgentTanh,
        RefMode::AgentNoscale,
        RefMode::AgentSigma,
        RefMode::AgentFixedGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RefMode::Center => "center",
            RefMode::CenterWhm => "center-whm",
            RefMode::AgentUnnormalized => "agent-unnormalized",
            RefMode::AgentTanh => "agent-tanh",
            RefMode::AgentNoscale => "agent-noscale",
            RefMode::AgentSigma => "agent-sigma",
            RefMode::AgentFixedGrid => "agent-fixed-grid",
        }
    }

    /// True when the mode consumes a walker.
    pub fn uses_walker(self) -> bool {
        matches!(
            self,
            RefMode::AgentUnnormalized | RefMode::AgentTanh | RefMode::AgentNoscale | RefMode::AgentSigma
        )
    }

    /// True when heads get distinct reference points.
    pub fn is_agent(self) -> bool {
        self.uses_walker() || self == RefMode::AgentFixedGrid
    }
}

impl fmt::Display for RefMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RefMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "agent" | "box-agent" => RefMode::AgentUnnormalized,
            "center+whm" | "whm" => RefMode::CenterWhm,
            "agent-fixed" | "fixed-grid" => RefMode::AgentFixedGrid,
            _ => return RefMode::ALL
                .into_iter()
                .find(|m| m.name() == s)
                .ok_or_else(|| Error::invalid(format!("unknown reference mode {s:?}"))),
        };
        Ok(mode)
    }
}

/// Offsets of the fixed agent layout, in half-box units.
pub const FIXED_GRID: [[f64; 2]; 8] = [
    [-1.0, -1.0],
    [0.0, -1.0],
    [1.0, -1.0],
    [-1.0, 0.0],
    [1.0, 0.0],
    [-1.0, 1.0],
    [0.0, 1.0],
    [1.0, 1.0],
];

/// Per-head walker `z = (z_x, z_y)` of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Walker {
    pub z: Vec<[f64; 2]>,
}

/// Per-head agent points `b_i` of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPoints {
    pub points: Vec<[f64; 2]>,
}

/// `2nD + 2n`: a `D -> 2n` linear head with bias.
pub fn walker_param_count(dim: usize, heads: usize) -> usize {
    2 * heads * dim + 2 * heads
}

/// Registers the walker head. It starts at zero, so every agent begins at the box center.
pub fn init_walker_params(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize, heads: usize) -> Result<()> {
    store.init(seed, &format!("{prefix}.w"), &[dim, 2 * heads], Init::Zeros)?;
    store.init(seed, &format!("{prefix}.b"), &[2 * heads], Init::Zeros)
}

/// Raw walker `[q, heads, 2]` from decoder embeddings `[q, dim]`.
///
/// Mode activations (tanh) are applied by [`agent_points_tensor`].
pub fn walker_from_embedding(f: &Tensor, params: &Bound<'_>, prefix: &str, heads: usize) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.w"))?;
    match (f.shape(), w.shape()) {
        ([q, d], [wd, out]) if d == wd && *out == 2 * heads => {
            nn::linear(f, params, prefix)?.reshape(&[*q, heads, 2])
        }
        (fs, ws) => Err(Error::shape("walker_from_embedding", fs, ws)),
    }
}

/// The walker as it enters the agent formula (tanh applied in tanh mode).
pub fn effective_walker(z: &[f64], mode: RefMode) -> Vec<f64> {
    match mode {
        RefMode::AgentTanh => z.iter().map(|v| v.tanh()).collect(),
        _ => z.to_vec(),
    }
}

fn clamp_size(b: &BoxCCWH) -> (f64, f64) {
    (b.w.max(MIN_BOX_SIZE), b.h.max(MIN_BOX_SIZE))
}

/// Agent points of one box for `heads` heads.
///
/// `walker` is required for walker-driven modes and ignored otherwise.
pub fn agent_points(b: &BoxCCWH, walker: Option<&Walker>, mode: RefMode, heads: usize) -> Result<AgentPoints> {
    let (w, h) = clamp_size(b);
    let c = [b.cx, b.cy];
    let z = |i: usize| -> Result<[f64; 2]> {
        let walker = walker.ok_or_else(|| Error::invalid(format!("mode {mode} needs a walker")))?;
        if walker.z.len() != heads {
            return Err(Error::invalid(format!("walker has {} heads, expected {heads}", walker.z.len())));
        }
        Ok(walker.z[i])
    };
    let mut points = Vec::with_capacity(heads);
    for i in 0..heads {
        let p = match mode {
            RefMode::Center | RefMode::CenterWhm => c,
            RefMode::AgentUnnormalized => {
                let z = z(i)?;
                [c[0] + z[0] * (w / 2.0), c[1] + z[1] * (h / 2.0)]
            }
            RefMode::AgentTanh => {
                let z = z(i)?;
                [c[0] + z[0].tanh() * (w / 2.0), c[1] + z[1].tanh() * (h / 2.0)]
            }
            RefMode::AgentNoscale => {
                let z = z(i)?;
                [c[0] + z[0], c[1] + z[1]]
            }
            RefMode::AgentSigma => {
                let z = z(i)?;
                [
                    sigmoid(inverse_sigmoid(c[0], INVERSE_SIGMOID_EPS) + z[0]),
                    sigmoid(inverse_sigmoid(c[1], INVERSE_SIGMOID_EPS) + z[1]),
                ]
            }
            RefMode::AgentFixedGrid => {
                check_grid_heads(heads)?;
                let g = FIXED_GRID[i];
                [c[0] + g[0] * (w / 2.0), c[1] + g[1] * (h / 2.0)]
            }
        };
        points.push(p);
    }
    Ok(AgentPoints { points })
}

fn check_grid_heads(heads: usize) -> Result<()> {
    if heads != FIXED_GRID.len() {
        return Err(Error::invalid(format!("fixed-grid agents need {} heads, got {heads}", FIXED_GRID.len())));
    }
    Ok(())
}

/// Differentiable agent points `[q, heads, 2]` from boxes `[q, 4]` and raw walker `[q, heads, 2]`.
pub fn agent_points_tensor(boxes: &Tensor, walker: Option<&Tensor>, mode: RefMode, heads: usize) -> Result<Tensor> {
    let q = match boxes.shape() {
        [q, 4] => *q,
        s => return Err(Error::shape("agent_points", s, &[4])),
    };
    let center = boxes.slice(1, 0, 2)?.reshape(&[q, 1, 2])?;
    let half = || -> Result<Tensor> { boxes.slice(1, 2, 4)?.clamp_min(MIN_BOX_SIZE)?.scale(0.5)?.reshape(&[q, 1, 2]) };
    let z = || -> Result<&Tensor> {
        let z = walker.ok_or_else(|| Error::invalid(format!("mode {mode} needs a walker")))?;
        if z.shape() != [q, heads, 2] {
            return Err(Error::shape("agent_points", z.shape(), &[q, heads, 2]));
        }
        Ok(z)
    };
    match mode {
        RefMode::Center | RefMode::CenterWhm => center.expand(&[q, heads, 2]),
        RefMode::AgentUnnormalized => center.add(&z()?.mul(&half()?)?),
        RefMode::AgentTanh => center.add(&z()?.tanh()?.mul(&half()?)?),
        RefMode::AgentNoscale => center.add(z()?),
        RefMode::AgentSigma => center.logit(INVERSE_SIGMOID_EPS)?.add(z()?)?.sigmoid(),
        RefMode::AgentFixedGrid => {
            check_grid_heads(heads)?;
            let grid = Tensor::new(&[1, heads, 2], FIXED_GRID.concat())?;
            center.add(&grid.mul(&half()?)?)
        }
    }
}

/// `p_q^i = λ_q ⊙ PE(b_i)` for every head, full width.
pub fn per_head_spatial_queries(lambda: &[f64], agents: &AgentPoints, dim: usize, temperature: f64) -> Result<Vec<PosEmbed>> {
    if lambda.len() != dim {
        return Err(Error::shape("per_head_spatial_queries", &[lambda.len()], &[dim]));
    }
    agents
        .points
        .iter()
        .map(|p| {
            let e = sinusoidal_embed(p[0], p[1], dim, temperature)?;
            Ok(PosEmbed(e.0.iter().zip(lambda).map(|(a, l)| a * l).collect()))
        })
        .collect()
}

/// Tensor route: agents `[q, heads, 2]`, `λ` `[q, dim]`, optional x/y modulation
/// `[q]` each, giving the per-head spatial queries `[heads, q, dim/heads]`.
pub fn per_head_spatial_queries_tensor(
    lambda: &Tensor,
    agents: &Tensor,
    dim: usize,
    temperature: f64,
    modulation: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    let (q, heads) = match agents.shape() {
        [q, n, 2] => (*q, *n),
        s => return Err(Error::shape("per_head_spatial_queries", s, &[2])),
    };
    if lambda.shape() != [q, dim] {
        return Err(Error::shape("per_head_spatial_queries", lambda.shape(), &[q, dim]));
    }
    let mut emb = agents.sine_embed(dim, temperature)?;
    if let Some((fx, fy)) = modulation {
        emb = crate::attention::modulate_embedding(&emb, fx, fy)?;
    }
    emb.mul(&lambda.reshape(&[q, 1, dim])?)?.head_blocks(heads)
}

const HIST_BINS: usize = 50;
const HIST_RANGE: f64 = 3.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    fn new() -> Self {
        let width = 2.0 * HIST_RANGE / HIST_BINS as f64;
        Self {
            bin_edges: (0..=HIST_BINS).map(|i| -HIST_RANGE + i as f64 * width).collect(),
            counts: vec![0; HIST_BINS],
            underflow: 0,
            overflow: 0,
        }
    }

    fn add(&mut self, v: f64) {
        if v < -HIST_RANGE {
            self.underflow += 1;
        } else if v > HIST_RANGE {
            self.overflow += 1;
        } else {
            let width = 2.0 * HIST_RANGE / HIST_BINS as f64;
            let bin = (((v + HIST_RANGE) / width) as usize).min(HIST_BINS - 1);
            self.counts[bin] += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageWalkerStats {
    pub count: u64,
    pub fraction_in_range: f64,
    pub fraction_in_range_x: f64,
    pub fraction_in_range_y: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerSummary {
    pub mode: RefMode,
    pub overall: StageWalkerStats,
    pub stages: BTreeMap<String, StageWalkerStats>,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    inside: [u64; 2],
    count: [u64; 2],
    hist: Option<Histogram>,
}

impl Tally {
    fn add(&mut self, z: [f64; 2]) {
        let hist = self.hist.get_or_insert_with(Histogram::new);
        for (axis, v) in z.into_iter().enumerate() {
            self.count[axis] += 1;
            if (-1.0..=1.0).contains(&v) {
                self.inside[axis] += 1;
            }
            hist.add(v);
        }
    }

    fn finish(&self) -> StageWalkerStats {
        let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let total = self.count[0] + self.count[1];
        StageWalkerStats {
            count: total,
            fraction_in_range: frac(self.inside[0] + self.inside[1], total),
            fraction_in_range_x: frac(self.inside[0], self.count[0]),
            fraction_in_range_y: frac(self.inside[1], self.count[1]),
            histogram: self.hist.clone().unwrap_or_else(Histogram::new),
        }
    }
}

/// Collects walker components per decoder stage.
#[derive(Debug, Clone)]
pub struct WalkerStats {
    mode: RefMode,
    overall: Tally,
    stages: BTreeMap<usize, Tally>,
}

impl WalkerStats {
    pub fn new(mode: RefMode) -> Self {
        Self {
            mode,
            overall: Tally::default(),
            stages: BTreeMap::new(),
        }
    }

    /// Records `(z_x, z_y)` pairs laid out flat (`[.., 2]`).
    pub fn record(&mut self, stage: usize, z: &[f64]) {
        for pair in z.chunks_exact(2) {
            let v = [pair[0], pair[1]];
            self.overall.add(v);
            self.stages.entry(stage).or_default().add(v);
        }
    }

    pub fn merge(&mut self, other: &WalkerStats) {
        let merge = |a: &mut Tally, b: &Tally| {
            for k in 0..2 {
                a.inside[k] += b.inside[k];
                a.count[k] += b.count[k];
            }
            if let Some(hb) = &b.hist {
                let ha = a.hist.get_or_insert_with(Histogram::new);
                ha.counts.iter_mut().zip(&hb.counts).for_each(|(x, y)| *x += y);
                ha.underflow += hb.underflow;
                ha.overflow += hb.overflow;
            }
        };
        merge(&mut self.overall, &other.overall);
        for (s, t) in &other.stages {
            merge(self.stages.entry(*s).or_default(), t);
        }
    }

    pub fn summary(&self) -> Result<WalkerSummary> {
        if self.overall.count[0] == 0 {
            return Err(Error::invalid("no walkers recorded"));
        }
        Ok(WalkerSummary {
            mode: self.mode,
            overall: self.overall.finish(),
            stages: self.stages.iter().map(|(s, t)| (s.to_string(), t.finish())).collect(),
        })
    }
}
