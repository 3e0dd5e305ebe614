//! Python bindings. Configs, curves and reports cross the boundary as JSON text.

use std::path::PathBuf;

use agent_detr::attention::{self, ModulationFactors, WhMode};
use agent_detr::bench::artifacts::write_run;
use agent_detr::bench::scene::generate_split;
use agent_detr::bench::{checkpoint, evaluate, RunConfig};
use agent_detr::box_agent::{self, RefMode, Walker};
use agent_detr::geometry::{self, BoxCCWH};
use agent_detr::matcher::{self, Assignment, CostMatrix};
use agent_detr::selftest;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn ref_mode(name: &str) -> PyResult<RefMode> {
    name.parse().map_err(err)
}

fn wh_mode(name: &str) -> PyResult<WhMode> {
    serde_json::from_value(serde_json::Value::String(name.to_owned())).map_err(err)
}

fn config(json: Option<&str>) -> PyResult<RunConfig> {
    let c: RunConfig = match json {
        Some(text) => serde_json::from_str(text).map_err(err)?,
        None => RunConfig::reference(),
    };
    c.validate().map_err(err)?;
    Ok(c)
}

fn ccwh(b: (f64, f64, f64, f64)) -> BoxCCWH {
    BoxCCWH::new(b.0, b.1, b.2, b.3)
}

/// Sinusoidal embedding of a normalized point.
#[pyfunction]
#[pyo3(signature = (x, y, dim, temperature = attention::DEFAULT_TEMPERATURE))]
fn sinusoidal_embed(x: f64, y: f64, dim: usize, temperature: f64) -> PyResult<Vec<f64>> {
    Ok(attention::sinusoidal_embed(x, y, dim, temperature).map_err(err)?.0)
}

/// Reference point of every head for one `(cx, cy, w, h)` box.
#[pyfunction]
#[pyo3(signature = (r#box, mode, heads, walker = None))]
fn agent_points(
    r#box: (f64, f64, f64, f64),
    mode: &str,
    heads: usize,
    walker: Option<Vec<(f64, f64)>>,
) -> PyResult<Vec<(f64, f64)>> {
    let walker = walker.map(|z| Walker { z: z.into_iter().map(|(x, y)| [x, y]).collect() });
    let points = box_agent::agent_points(&ccwh(r#box), walker.as_ref(), ref_mode(mode)?, heads).map_err(err)?;
    Ok(points.points.into_iter().map(|[x, y]| (x, y)).collect())
}

/// Spatial logit from separated x and y inner products.
#[pyfunction]
#[pyo3(signature = (x_term, y_term, mode, dim, w_ref = 0.0, h_ref = 0.0, w_q = 1.0, h_q = 1.0))]
#[allow(clippy::too_many_arguments)]
fn wh_modulate(x_term: f64, y_term: f64, mode: &str, dim: usize, w_ref: f64, h_ref: f64, w_q: f64, h_q: f64) -> PyResult<f64> {
    let factors = ModulationFactors { w_ref, h_ref, w_q, h_q, mode: wh_mode(mode)? };
    attention::wh_modulate(x_term, y_term, &factors, dim).map_err(err)
}

#[pyfunction]
fn walker_param_count(dim: usize, heads: usize) -> usize {
    box_agent::walker_param_count(dim, heads)
}

#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    geometry::iou(&ccwh(a).to_corners(), &ccwh(b).to_corners())
}

#[pyfunction]
fn giou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    geometry::giou(&ccwh(a).to_corners(), &ccwh(b).to_corners())
}

fn solve(rows: Vec<Vec<f64>>, f: fn(&CostMatrix) -> agent_detr::Result<Assignment>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let cost = CostMatrix::from_rows(&rows).map_err(err)?;
    let a = f(&cost).map_err(err)?;
    let total = a.total(&cost);
    Ok((a.pairs, total))
}

/// Optimal `(prediction, target)` pairs and their total for a predictions x targets cost matrix.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    solve(cost, matcher::hungarian)
}

#[pyfunction]
fn brute_force(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    solve(cost, matcher::brute_force)
}

#[pyfunction]
fn reference_config() -> PyResult<String> {
    RunConfig::reference().to_json().map_err(err)
}

#[pyfunction]
fn mini_config() -> PyResult<String> {
    RunConfig::mini().to_json().map_err(err)
}

/// Trains the JSON config (reference when omitted). Writes run files to `out_dir`
/// when given and returns `{"curve": [...], "final_eval": {...}}` as JSON.
#[pyfunction]
#[pyo3(signature = (config_json = None, out_dir = None))]
fn train(py: Python<'_>, config_json: Option<&str>, out_dir: Option<PathBuf>) -> PyResult<String> {
    let c = config(config_json)?;
    py.detach(|| -> agent_detr::Result<String> {
        let result = agent_detr::bench::train(&c)?;
        if let Some(dir) = out_dir {
            write_run(&dir, &result)?;
        }
        Ok(serde_json::json!({ "curve": result.curve, "final_eval": result.final_eval }).to_string())
    })
    .map_err(err)
}

/// Evaluates a checkpoint on the eval scenes of its config; returns JSON.
#[pyfunction]
fn evaluate_checkpoint(path: PathBuf) -> PyResult<String> {
    let model = checkpoint::load(&path, None).map_err(err)?;
    let c = &model.config;
    let scenes = generate_split(&c.scene, c.scene_seed, 1, c.eval_scenes).map_err(err)?;
    serde_json::to_string(&evaluate(&model, &scenes).map_err(err)?).map_err(err)
}

/// `(name, passed, detail)` for every built-in check.
#[pyfunction]
fn run_selftest(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(selftest::run)
        .into_iter()
        .map(|c| (c.name.to_owned(), c.passed, c.detail))
        .collect()
}

#[pymodule]
#[pyo3(name = "agent_detr")]
fn agent_detr_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sinusoidal_embed, m)?)?;
    m.add_function(wrap_pyfunction!(agent_points, m)?)?;
    m.add_function(wrap_pyfunction!(wh_modulate, m)?)?;
    m.add_function(wrap_pyfunction!(walker_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(reference_config, m)?)?;
    m.add_function(wrap_pyfunction!(mini_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    m.add("REF_MODES", RefMode::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    Ok(())
}
