//! Stagewise anchor-box decoder.
//!
//! Each stage runs self-attention over the queries (position term from the
//! current box center), conditional cross-attention against the memory with
//! the configured reference points, a feed-forward block, and refines the
//! anchor logits with a shared box head. A shared class head scores every
//! stage for the auxiliary losses.

use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention, init_lambda_params, lambda_from_embedding, multi_head_attention, wh_factors, CrossAttentionInput,
    HeadLayout, SpatialQuery, WhMode, DEFAULT_TEMPERATURE,
};
use crate::box_agent::{
    agent_points_tensor, effective_walker, init_walker_params, per_head_spatial_queries_tensor, walker_from_embedding,
    RefMode,
};
use crate::error::{Error, Result};
use crate::geometry::{inverse_sigmoid, INVERSE_SIGMOID_EPS};
use crate::nn;
use crate::numerics::{Bound, Init, ParamStore, Tensor, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub stages: usize,
    pub queries: usize,
    pub dim: usize,
    pub heads: usize,
    pub ref_mode: RefMode,
    /// Width/height modulation of the spatial term. `center-whm` turns on
    /// `original` when this is left `off`.
    pub wh_mode: WhMode,
    pub temperature: f64,
    pub classes: usize,
    /// Hidden width of the feed-forward block; 0 means `2 * dim`.
    pub ffn_dim: usize,
    /// Stop the gradient through the incoming logits of each refinement.
    pub detach_boxes: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            queries: 16,
            dim: 64,
            heads: 8,
            ref_mode: RefMode::AgentUnnormalized,
            wh_mode: WhMode::Off,
            temperature: DEFAULT_TEMPERATURE,
            classes: 3,
            ffn_dim: 0,
            detach_boxes: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.queries == 0 || self.classes == 0 {
            return Err(Error::invalid("stages, queries and classes must be positive"));
        }
        HeadLayout::new(self.dim, self.heads)?;
        if self.dim % 4 != 0 {
            return Err(Error::invalid(format!("dim {} must be a multiple of 4", self.dim)));
        }
        if self.dim / self.heads % 2 != 0 {
            // head blocks must not split a sin/cos pair
            return Err(Error::invalid(format!("head width {} must be even", self.dim / self.heads)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.ref_mode == RefMode::AgentFixedGrid && self.heads != 8 {
            return Err(Error::invalid("agent-fixed-grid needs 8 heads"));
        }
        Ok(())
    }

    pub fn effective_wh(&self) -> WhMode {
        match (self.ref_mode, self.wh_mode) {
            (RefMode::CenterWhm, WhMode::Off) => WhMode::Original,
            (_, m) => m,
        }
    }

    pub fn hidden(&self) -> usize {
        if self.ffn_dim == 0 {
            2 * self.dim
        } else {
            self.ffn_dim
        }
    }

    pub fn layout(&self) -> Result<HeadLayout> {
        HeadLayout::new(self.dim, self.heads)
    }
}

/// Encoder output: content tokens and their key position embeddings.
#[derive(Debug, Clone)]
pub struct MemoryTokens {
    /// `[tokens, dim]`
    pub content: Tensor,
    /// `[tokens, dim]`, not differentiated.
    pub pos: Tensor,
    /// `pos` split per head, `[heads, tokens, dim / heads]`, when precomputed.
    pub pos_heads: Option<Tensor>,
}

impl MemoryTokens {
    pub fn new(content: Tensor, pos: Tensor) -> Self {
        Self {
            content,
            pos,
            pos_heads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.content.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    /// `[queries, 4]`, boxes are `sigmoid(logits)`.
    pub logits: Tensor,
    /// `[queries, dim]`
    pub embeddings: Tensor,
    pub stage: usize,
}

impl DecoderState {
    pub fn boxes(&self) -> Result<Tensor> {
        self.logits.sigmoid()
    }
}

/// Detached per-stage record for visualization and statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    /// Boxes entering the stage, `[queries][4]`.
    pub previous_boxes: Vec<[f64; 4]>,
    /// Refined boxes, `[queries][4]`.
    pub boxes: Vec<[f64; 4]>,
    /// Reference point of each head, `[queries][heads]`.
    pub agent_points: Vec<Vec<[f64; 2]>>,
    /// Cross-attention weights, `[heads][queries][tokens]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Softmax of the spatial term alone, same layout as `weights`.
    pub spatial_weights: Vec<Vec<Vec<f64>>>,
    /// `[queries][classes + 1]`
    pub class_logits: Vec<Vec<f64>>,
}

/// Predictions of one stage.
#[derive(Debug, Clone)]
pub struct StagePrediction {
    /// `[queries, 4]` boxes in `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// `[queries, classes + 1]`; the last column is "no object".
    pub class_logits: Tensor,
    /// Walker as applied to the box (after tanh in tanh mode), `[queries * heads * 2]`.
    pub walker: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub stages: Vec<StagePrediction>,
    pub traces: Vec<StageTrace>,
}

fn init_norm(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize) -> Result<()> {
    store.init(seed, &format!("{prefix}.g"), &[dim], Init::Constant(1.0))?;
    store.init(seed, &format!("{prefix}.b"), &[dim], Init::Zeros)
}

fn norm(x: &Tensor, params: &Bound<'_>, prefix: &str) -> Result<Tensor> {
    x.layer_norm(LAYER_NORM_EPS)?
        .mul(params.get(&format!("{prefix}.g"))?)?
        .add(params.get(&format!("{prefix}.b"))?)
}

/// Learnable anchors: `inverse_sigmoid(U(0.05, 0.95))` logits under the name `anchors`.
pub fn init_queries(config: &DecoderConfig, seed: u64, store: &mut ParamStore) -> Result<()> {
    store.init(seed, "anchors", &[config.queries, 4], Init::Uniform(0.05, 0.95))?;
    let anchors = store.get_mut("anchors").expect("just inserted");
    for v in &mut anchors.values {
        *v = inverse_sigmoid(*v, INVERSE_SIGMOID_EPS);
    }
    Ok(())
}

/// Starting state: the anchor logits and zero content.
pub fn initial_state(config: &DecoderConfig, params: &Bound<'_>) -> Result<DecoderState> {
    let logits = params.get("anchors")?.clone();
    if logits.shape() != [config.queries, 4] {
        return Err(Error::shape("initial_state", logits.shape(), &[config.queries, 4]));
    }
    Ok(DecoderState {
        logits,
        embeddings: Tensor::zeros(&[config.queries, config.dim]),
        stage: 0,
    })
}

pub fn stage_prefix(stage: usize) -> String {
    format!("stage{stage}")
}

/// Registers anchors, every stage and the shared heads.
pub fn init_decoder_params(config: &DecoderConfig, seed: u64, store: &mut ParamStore) -> Result<()> {
    config.validate()?;
    let d = config.dim;
    init_queries(config, seed, store)?;
    for s in 0..config.stages {
        let p = stage_prefix(s);
        nn::init_mlp(store, seed, &format!("{p}.self.pos"), &[d, d, d])?;
        for proj in ["q", "k", "v", "o"] {
            nn::init_linear(store, seed, &format!("{p}.self.{proj}"), d, d)?;
        }
        init_norm(store, seed, &format!("{p}.self.norm"), d)?;
        init_lambda_params(store, seed, &format!("{p}.cross.lambda"), d)?;
        if config.ref_mode.uses_walker() {
            init_walker_params(store, seed, &format!("{p}.cross.walker"), d, config.heads)?;
        }
        if config.effective_wh() != WhMode::Off {
            nn::init_mlp(store, seed, &format!("{p}.cross.wh"), &[d, d, 2])?;
        }
        for proj in ["q", "k", "v", "o"] {
            nn::init_linear(store, seed, &format!("{p}.cross.{proj}"), d, d)?;
        }
        init_norm(store, seed, &format!("{p}.cross.norm"), d)?;
        nn::init_mlp(store, seed, &format!("{p}.ffn"), &[d, config.hidden(), d])?;
        init_norm(store, seed, &format!("{p}.ffn.norm"), d)?;
    }
    nn::init_mlp(store, seed, "box", &[d, d, 4])?;
    // refinement starts as the identity
    store.zero_where(|n| n == "box.1.w");
    nn::init_linear(store, seed, "cls", d, config.classes + 1)
}

fn detached_rows<const K: usize>(t: &Tensor) -> Vec<[f64; K]> {
    t.data().chunks_exact(K).map(|c| c.try_into().expect("chunk width")).collect()
}

fn nested(data: &[f64], shape: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let (a, b, c) = (shape[0], shape[1], shape[2]);
    (0..a)
        .map(|i| (0..b).map(|j| data[(i * b + j) * c..(i * b + j + 1) * c].to_vec()).collect())
        .collect()
}

/// One refinement stage.
pub fn decoder_stage(
    state: &DecoderState,
    memory: &MemoryTokens,
    params: &Bound<'_>,
    config: &DecoderConfig,
    trace: bool,
) -> Result<(DecoderState, StagePrediction, Option<StageTrace>)> {
    let layout = config.layout()?;
    let (nq, d, heads) = (config.queries, config.dim, config.heads);
    if memory.content.shape().len() != 2 || memory.content.shape()[1] != d || memory.pos.shape() != memory.content.shape() {
        return Err(Error::shape("decoder_stage", memory.content.shape(), &[memory.len(), d]));
    }
    if state.logits.shape() != [nq, 4] || state.embeddings.shape() != [nq, d] {
        return Err(Error::shape("decoder_stage", state.embeddings.shape(), &[nq, d]));
    }
    let p = stage_prefix(state.stage);
    let f = &state.embeddings;
    let boxes = state.logits.sigmoid()?;

    // self-attention, position from the box center
    let center_pe = boxes.slice(1, 0, 2)?.sine_embed(d, config.temperature)?;
    let pos = nn::mlp(&center_pe, params, &format!("{p}.self.pos"), 2)?;
    let qk = f.add(&pos)?;
    let (sa, _) = multi_head_attention(
        &nn::linear(&qk, params, &format!("{p}.self.q"))?,
        &nn::linear(&qk, params, &format!("{p}.self.k"))?,
        &nn::linear(f, params, &format!("{p}.self.v"))?,
        &layout,
    )?;
    let sa = nn::linear(&sa, params, &format!("{p}.self.o"))?;
    let f1 = norm(&f.add(&sa)?, params, &format!("{p}.self.norm"))?;

    // conditional cross-attention
    let lambda = lambda_from_embedding(&f1, params, &format!("{p}.cross.lambda"))?;
    let walker = if config.ref_mode.uses_walker() {
        Some(walker_from_embedding(&f1, params, &format!("{p}.cross.walker"), heads)?)
    } else {
        None
    };
    let agents = agent_points_tensor(&boxes, walker.as_ref(), config.ref_mode, heads)?;
    let wh = config.effective_wh();
    let factors = if wh != WhMode::Off {
        let refs = nn::mlp(&f1, params, &format!("{p}.cross.wh"), 2)?.sigmoid()?;
        let col = |t: &Tensor, i: usize| -> Result<Tensor> { t.slice(1, i, i + 1)?.reshape(&[nq]) };
        Some(wh_factors(&col(&refs, 0)?, &col(&refs, 1)?, &col(&boxes, 2)?, &col(&boxes, 3)?, wh)?)
    } else {
        None
    };
    let spatial_q = per_head_spatial_queries_tensor(
        &lambda,
        &agents,
        d,
        config.temperature,
        factors.as_ref().map(|(x, y)| (x, y)),
    )?;
    let split_pos;
    let spatial_k = match &memory.pos_heads {
        Some(t) if t.shape() == [heads, memory.len(), d / heads] => t,
        Some(t) => return Err(Error::shape("decoder_stage", t.shape(), &[heads, memory.len(), d / heads])),
        None => {
            split_pos = layout.split(&memory.pos)?;
            &split_pos
        }
    };
    let content_q = nn::linear(&f1, params, &format!("{p}.cross.q"))?;
    let content_k = nn::linear(&memory.content, params, &format!("{p}.cross.k"))?;
    let values = nn::linear(&memory.content, params, &format!("{p}.cross.v"))?;
    let attn = cross_attention(
        &CrossAttentionInput {
            content_q: &content_q,
            content_k: &content_k,
            spatial_q: SpatialQuery::PerHead(spatial_q),
            spatial_k: spatial_k,
            values: &values,
        },
        &layout,
        Some((params.get(&format!("{p}.cross.o.w"))?, params.get(&format!("{p}.cross.o.b"))?)),
    )?;
    let f2 = norm(&f1.add(&attn.output)?, params, &format!("{p}.cross.norm"))?;

    // feed-forward
    let ff = nn::mlp(&f2, params, &format!("{p}.ffn"), 2)?;
    let f3 = norm(&f2.add(&ff)?, params, &format!("{p}.ffn.norm"))?;

    // refinement and class heads
    let incoming = if config.detach_boxes { state.logits.detach() } else { state.logits.clone() };
    let logits = incoming.add(&nn::mlp(&f3, params, "box", 2)?)?;
    let new_boxes = logits.sigmoid()?;
    let class_logits = nn::linear(&f3, params, "cls")?;

    let walker_values = walker.as_ref().map(|z| effective_walker(z.data(), config.ref_mode));
    let trace = if trace {
        let scale = crate::attention::logit_scale(&layout);
        let spatial_weights = attn.spatial_logits.detach().scale(scale)?.softmax()?;
        let agents_rows: Vec<[f64; 2]> = detached_rows(&agents);
        Some(StageTrace {
            stage: state.stage,
            previous_boxes: detached_rows(&boxes),
            boxes: detached_rows(&new_boxes),
            agent_points: agents_rows.chunks(heads).map(|c| c.to_vec()).collect(),
            weights: nested(attn.weights.data(), attn.weights.shape()),
            spatial_weights: nested(spatial_weights.data(), spatial_weights.shape()),
            class_logits: class_logits.data().chunks(config.classes + 1).map(|c| c.to_vec()).collect(),
        })
    } else {
        None
    };
    let prediction = StagePrediction {
        boxes: new_boxes,
        class_logits,
        walker: walker_values,
    };
    let next = DecoderState {
        logits,
        embeddings: f3,
        stage: state.stage + 1,
    };
    Ok((next, prediction, trace))
}

/// Runs every stage from the anchors.
pub fn forward(memory: &MemoryTokens, config: &DecoderConfig, params: &Bound<'_>, trace: bool) -> Result<DecoderOutput> {
    config.validate()?;
    let mut state = initial_state(config, params)?;
    let mut out = DecoderOutput {
        stages: Vec::with_capacity(config.stages),
        traces: Vec::new(),
    };
    for _ in 0..config.stages {
        let (next, pred, tr) = decoder_stage(&state, memory, params, config, trace)?;
        out.stages.push(pred);
        out.traces.extend(tr);
        state = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::sinusoidal_embed;
    use crate::numerics::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mini(mode: RefMode) -> DecoderConfig {
        DecoderConfig {
            stages: 2,
            queries: 4,
            dim: 32,
            heads: 4,
            ref_mode: mode,
            classes: 2,
            ..DecoderConfig::default()
        }
    }

    fn memory(rng: &mut ChaCha8Rng, side: usize, dim: usize) -> MemoryTokens {
        let n = side * side;
        let content = Tensor::new(&[n, dim], (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut pos = Vec::with_capacity(n * dim);
        for r in 0..side {
            for c in 0..side {
                let e = sinusoidal_embed((c as f64 + 0.5) / side as f64, (r as f64 + 0.5) / side as f64, dim, 20.0).unwrap();
                pos.extend(e.0);
            }
        }
        MemoryTokens::new(content, Tensor::new(&[n, dim], pos).unwrap())
    }

    fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
        for p in store.iter_mut() {
            for v in &mut p.values {
                *v += rng.random_range(-amount..amount);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        assert!(DecoderConfig { heads: 5, ..DecoderConfig::default() }.validate().is_err());
        assert!(DecoderConfig { stages: 0, ..DecoderConfig::default() }.validate().is_err());
        assert!(DecoderConfig { ref_mode: RefMode::AgentFixedGrid, heads: 4, dim: 32, ..DecoderConfig::default() }
            .validate()
            .is_err());
        let c = DecoderConfig { ref_mode: RefMode::CenterWhm, ..DecoderConfig::default() };
        assert_eq!(c.effective_wh(), WhMode::Original);
    }

    #[test]
    fn query_initialization() {
        let c = DecoderConfig { queries: 1, ..DecoderConfig::default() };
        let mut store = ParamStore::new();
        init_queries(&c, 3, &mut store).unwrap();
        assert_eq!(store.get("anchors").unwrap().shape, vec![1, 4]);
        let state = initial_state(&c, &store.bind(None)).unwrap();
        assert!(state.embeddings.data().iter().all(|&v| v == 0.0));
        assert_eq!(state.embeddings.shape(), &[1, 64]);

        let c = DecoderConfig { queries: 250, ..DecoderConfig::default() };
        let (mut a, mut b) = (ParamStore::new(), ParamStore::new());
        init_queries(&c, 9, &mut a).unwrap();
        init_queries(&c, 9, &mut b).unwrap();
        assert_eq!(a, b);
        let boxes = a.bind(None).get("anchors").unwrap().sigmoid().unwrap();
        assert_eq!(boxes.numel(), 1000);
        assert!(boxes.data().iter().all(|&v| v > 0.05 - 1e-12 && v < 0.95 + 1e-12));
    }

    #[test]
    fn shapes_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in RefMode::ALL {
            let heads = if mode == RefMode::AgentFixedGrid { 8 } else { 4 };
            let c = DecoderConfig { heads, ..mini(mode) };
            let mut store = ParamStore::new();
            init_decoder_params(&c, 5, &mut store).unwrap();
            let mem = memory(&mut rng, 6, 32);
            let out = forward(&mem, &c, &store.bind(None), true).unwrap();
            assert_eq!(out.stages.len(), 2);
            assert_eq!(out.traces.len(), 2);
            for (s, tr) in out.stages.iter().zip(&out.traces) {
                assert_eq!(s.boxes.shape(), &[4, 4]);
                assert_eq!(s.class_logits.shape(), &[4, 3]);
                assert!(s.boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
                assert_eq!(tr.weights.len(), heads);
                assert_eq!(tr.agent_points.len(), 4);
                assert!(tr.agent_points.iter().all(|a| a.len() == heads));
                for maps in [&tr.weights, &tr.spatial_weights] {
                    for row in maps.iter().flatten() {
                        assert_eq!(row.len(), 36);
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
            let single = DecoderConfig { stages: 1, ..c.clone() };
            assert_eq!(forward(&mem, &single, &store.bind(None), false).unwrap().stages.len(), 1);
        }
    }

    #[test]
    fn zero_box_head_keeps_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = mini(RefMode::AgentUnnormalized);
        let mut store = ParamStore::new();
        init_decoder_params(&c, 1, &mut store).unwrap();
        jitter(&mut store, &mut rng, 0.1);
        store.zero_where(|n| n.starts_with("box.1."));
        let mem = memory(&mut rng, 6, 32);
        let bound = store.bind(None);
        let state = initial_state(&c, &bound).unwrap();
        let (next, pred, _) = decoder_stage(&state, &mem, &bound, &c, false).unwrap();
        assert_eq!(next.logits.data(), state.logits.data());
        assert_eq!(pred.boxes.data(), state.logits.sigmoid().unwrap().data());
    }

    #[test]
    fn zero_walker_reduces_to_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let seed = rng.random();
            let agent = DecoderConfig { stages: 3, ..mini(RefMode::AgentUnnormalized) };
            let center = DecoderConfig { ref_mode: RefMode::Center, ..agent.clone() };
            let (mut sa, mut sc) = (ParamStore::new(), ParamStore::new());
            init_decoder_params(&agent, seed, &mut sa).unwrap();
            init_decoder_params(&center, seed, &mut sc).unwrap();
            let mem = memory(&mut rng, 6, 32);
            let oa = forward(&mem, &agent, &sa.bind(None), true).unwrap();
            let oc = forward(&mem, &center, &sc.bind(None), true).unwrap();
            for (a, c) in oa.stages.iter().zip(&oc.stages) {
                assert_eq!(a.boxes, c.boxes);
                assert_eq!(a.class_logits, c.class_logits);
            }
            assert_eq!(oa.traces, oc.traces);
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = mini(RefMode::AgentTanh);
        let mut store = ParamStore::new();
        init_decoder_params(&c, 7, &mut store).unwrap();
        let mem = memory(&mut rng, 6, 32);
        let a = forward(&mem, &c, &store.bind(None), true).unwrap();
        let b = forward(&mem, &c, &store.bind(None), true).unwrap();
        assert_eq!(a.traces, b.traces);
    }

    #[test]
    fn rejects_mismatched_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = mini(RefMode::Center);
        let mut store = ParamStore::new();
        init_decoder_params(&c, 7, &mut store).unwrap();
        let mem = memory(&mut rng, 6, 16);
        assert!(forward(&mem, &c, &store.bind(None), false).is_err());
    }

    #[test]
    fn stage_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (mode, wh) in [(RefMode::AgentUnnormalized, WhMode::Off), (RefMode::Center, WhMode::Original)] {
            let c = DecoderConfig { stages: 1, queries: 2, dim: 16, heads: 2, wh_mode: wh, detach_boxes: false, ..mini(mode) };
            let mut store = ParamStore::new();
            init_decoder_params(&c, 8, &mut store).unwrap();
            jitter(&mut store, &mut rng, 0.2);
            let mem = memory(&mut rng, 3, 16);
            let report = finite_difference_check(
                |p| {
                    let bound = store.bind_tensors(p.to_vec())?;
                    let out = forward(&mem, &c, &bound, false)?;
                    let s = &out.stages[0];
                    s.boxes.mul(&s.boxes)?.sum()?.add(&s.class_logits.sigmoid()?.sum()?)
                },
                &store.tensors(),
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{mode}: {report:?}");
        }
    }
}
