//! Quick oracle and invariant checks, runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{sinusoidal_embed, wh_modulate, ModulationFactors, WhMode};
use crate::bench::artifacts::curve_csv;
use crate::bench::scene::generate_split;
use crate::bench::{train, Model, RunConfig};
use crate::box_agent::{agent_points, walker_param_count, RefMode, Walker};
use crate::decoder::{forward, init_decoder_params, MemoryTokens};
use crate::error::Result;
use crate::geometry::BoxCCWH;
use crate::matcher::{brute_force, hungarian, CostMatrix};
use crate::numerics::{finite_difference_check, ParamStore, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn gradient() -> Result<(bool, String)> {
    let config = RunConfig::mini();
    let mut model = Model::new(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for p in model.params.iter_mut() {
        for v in &mut p.values {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let scene = generate_split(&config.scene, 7, 0, 1)?.remove(0);
    let fixed = model.assignments(&scene)?;
    let report = finite_difference_check(
        |p| Ok(model.scene_loss(&model.params.bind_tensors(p.to_vec())?, &scene, Some(&fixed))?.total),
        &model.params.tensors(),
        1e-6,
    )?;
    Ok((
        report.max_rel_error < 1e-4,
        format!(
            "max relative error {:.2e} over {} entries (worst {}[{}]: analytic {:.6e}, numeric {:.6e})",
            report.max_rel_error,
            report.entries,
            model.params.iter().nth(report.worst.0).map_or("?", |p| p.name.as_str()),
            report.worst.1,
            report.analytic,
            report.numeric
        ),
    ))
}

fn matching() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bad = 0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=7);
        let p = rng.random_range(t..=7);
        let c = CostMatrix::new(p, t, (0..p * t).map(|_| rng.random_range(0.0..10.0)).collect())?;
        if hungarian(&c)?.total(&c) != brute_force(&c)?.total(&c) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} of 1000 matrices disagree")))
}

fn agents() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut outside = 0;
    for _ in 0..10_000 {
        let b = BoxCCWH::new(rng.random(), rng.random(), rng.random(), rng.random());
        let z = Walker { z: vec![[rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]] };
        let p = agent_points(&b, Some(&z), RefMode::AgentTanh, 1)?.points[0];
        if (p[0] - b.cx).abs() > b.w.max(1e-4) / 2.0 + f64::EPSILON || (p[1] - b.cy).abs() > b.h.max(1e-4) / 2.0 + f64::EPSILON {
            outside += 1;
        }
    }
    let b = BoxCCWH::new(0.4, 0.6, 0.2, 0.3);
    let center = agent_points(&b, Some(&Walker { z: vec![[0.0, 0.0]] }), RefMode::AgentUnnormalized, 1)?.points[0];
    let left = agent_points(&b, Some(&Walker { z: vec![[-1.0, 0.0]] }), RefMode::AgentUnnormalized, 1)?.points[0];
    let ok = outside == 0 && center == [0.4, 0.6] && left == [0.4 - 0.1, 0.6];
    Ok((ok, format!("{outside} tanh agents outside; center {center:?}; left midpoint {left:?}")))
}

fn reduction() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let agent = RunConfig::mini().decoder;
    let center = crate::decoder::DecoderConfig { ref_mode: RefMode::Center, ..agent.clone() };
    let mut same = 0;
    for _ in 0..10 {
        let seed = rng.random();
        let (mut a, mut c) = (ParamStore::new(), ParamStore::new());
        init_decoder_params(&agent, seed, &mut a)?;
        init_decoder_params(&center, seed, &mut c)?;
        let content = Tensor::new(&[36, 32], (0..36 * 32).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let memory = MemoryTokens::new(content, crate::bench::encoder::token_positions(6, 6, 32, 20.0)?);
        let (oa, oc) = (forward(&memory, &agent, &a.bind(None), true)?, forward(&memory, &center, &c.bind(None), true)?);
        let equal = oa.stages.iter().zip(&oc.stages).all(|(x, y)| x.boxes == y.boxes && x.class_logits == y.class_logits);
        if equal && oa.traces == oc.traces {
            same += 1;
        }
    }
    Ok((same == 10, format!("{same} of 10 passes bitwise equal")))
}

fn modulation() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut bad = 0;
    for _ in 0..1000 {
        let (x, y) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let (w, h) = (rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
        let f = |mode, w_ref, h_ref| ModulationFactors { w_ref, h_ref, w_q: w, h_q: h, mode };
        let off = wh_modulate(x, y, &f(WhMode::Off, 0.0, 0.0), 64)?;
        let orig = wh_modulate(x, y, &f(WhMode::Original, w, h), 64)?;
        let free = wh_modulate(x, y, &f(WhMode::ScaleFree, 0.5, 0.5), 64)?;
        if off.to_bits() != orig.to_bits() || off.to_bits() != free.to_bits() {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} of 1000 logits differ")))
}

fn positional_argmax() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let grid: Vec<_> = (0..2500)
        .map(|i| sinusoidal_embed(((i % 50) as f64 + 0.5) / 50.0, ((i / 50) as f64 + 0.5) / 50.0, 64, 20.0))
        .collect::<Result<_>>()?;
    let mut bad = 0;
    for _ in 0..100 {
        let (x, y): (f64, f64) = (rng.random(), rng.random());
        let e = sinusoidal_embed(x, y, 64, 20.0)?;
        let best = (0..2500).fold(0, |b, i| if e.dot(&grid[i]) > e.dot(&grid[b]) { i } else { b });
        let nearest = ((y * 50.0) as usize).min(49) * 50 + ((x * 50.0) as usize).min(49);
        if best != nearest {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} of 100 points miss their nearest grid cell")))
}

fn parameter_count() -> Result<(bool, String)> {
    let n = walker_param_count(256, 8);
    Ok((n == 4112, format!("walker head has {n} parameters at D=256, n=8")))
}

fn determinism() -> Result<(bool, String)> {
    let config = RunConfig::mini();
    let (a, b) = (train(&config)?, train(&config)?);
    let same = curve_csv(&a.curve) == curve_csv(&b.curve);
    let walker = a.final_eval.walker.as_ref().map_or(0, |w| w.stages.len());
    Ok((
        same && walker == config.decoder.stages,
        format!("curves identical: {same}; walker stats for {walker} stages"),
    ))
}

/// Every check, in order.
pub fn run() -> Vec<Check> {
    vec![
        check("gradient", gradient),
        check("matching", matching),
        check("agent-points", agents),
        check("reduction", reduction),
        check("wh-modulation", modulation),
        check("positional-argmax", positional_argmax),
        check("parameter-count", parameter_count),
        check("determinism", determinism),
    ]
}
