//! Python bindings for the analytics half of the harness: corpus loading
//! and sampling, answer extraction, summary-table computation, confidence
//! scoring, and the synthetic-world sweep. Everything crosses the boundary
//! as plain Python types (str, list, dict, tuple), so the module is usable
//! from a notebook without any wrapper classes.
//!
//! The protocol runner itself (live endpoints, ledgers, resume) stays on the
//! CLI side; these bindings cover the parts people want to compose with
//! pandas or matplotlib.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use benchaudit_core::corpus::{self, CorpusFormat, Label};
use benchaudit_core::metrics::{
    self, group_gains_by_model, group_gains_by_router, model_summary, router_summary,
};
use benchaudit_core::pipeline;
use benchaudit_core::report::{emit_model_table, emit_router_table, parse_detail_csv};
use benchaudit_core::simulator::{self, WorldConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Load a question file (csv or jsonl) as a list of dicts with keys
/// `id`, `stem`, `options`, `answer_key`.
#[pyfunction]
fn load_corpus(py: Python<'_>, path: &str) -> PyResult<Vec<Py<PyDict>>> {
    let set = corpus::load_benchmark(Path::new(path), CorpusFormat::Auto).map_err(value_err)?;
    set.questions
        .iter()
        .map(|q| {
            let d = PyDict::new(py);
            d.set_item("id", &q.id)?;
            d.set_item("stem", &q.stem)?;
            d.set_item("options", q.options.clone())?;
            d.set_item("answer_key", q.answer_key.to_string())?;
            Ok(d.unbind())
        })
        .collect()
}

/// Deterministic sample of `n` indices out of `0..len` for a given seed,
/// returned in ascending order. The same function drives `audit run`, so a
/// Python-side replication of a run's question subset uses this directly.
#[pyfunction]
fn sample_indices(len: usize, n: usize, seed: u64) -> PyResult<Vec<usize>> {
    if n > len {
        return Err(value_err(format!("cannot sample {n} of {len}")));
    }
    Ok(corpus::sample_indices(len, n, seed))
}

/// Load a corpus and return the ids of the seed-determined sample that an
/// audit configured with the same (n, seed) would run on.
#[pyfunction]
fn sample_ids(path: &str, n: usize, seed: u64) -> PyResult<Vec<String>> {
    let set = corpus::load_benchmark(Path::new(path), CorpusFormat::Auto).map_err(value_err)?;
    let sample = corpus::sample_questions(&set, n, seed).map_err(value_err)?;
    Ok(sample.questions.into_iter().map(|q| q.id).collect())
}

/// Extract the answer label from a model reply, given the number of options.
/// Returns the label letter, or None when the reply names no unique label
/// (such replies are scored as incorrect by the harness).
#[pyfunction]
fn extract_answer(reply: &str, n_options: usize) -> PyResult<Option<String>> {
    if n_options == 0 || n_options > 26 {
        return Err(value_err(format!(
            "n_options must be between 1 and 26, got {n_options}"
        )));
    }
    let labels: Vec<Label> = (0..n_options)
        .map(|i| Label::from_index(i).expect("bounds checked"))
        .collect();
    Ok(pipeline::extract_answer(reply, &labels).map(|l| l.to_string()))
}

/// Compute the per-model and per-router summary tables from a detail-grid
/// csv (`model,router,clean,noisy,gain,improve,degrade`). Returns the two
/// tables as csv strings: `(model_table, router_table)`.
#[pyfunction]
fn summarize_detail_csv(text: &str) -> PyResult<(String, String)> {
    let gains = parse_detail_csv(text).map_err(value_err)?;
    let model_rows: Vec<_> = group_gains_by_model(&gains)
        .iter()
        .map(|(_, gs)| model_summary(gs))
        .collect::<Result<_, _>>()
        .map_err(value_err)?;
    let router_rows: Vec<_> = group_gains_by_router(&gains)
        .iter()
        .map(|(_, gs)| router_summary(gs))
        .collect::<Result<_, _>>()
        .map_err(value_err)?;
    let model_doc = emit_model_table(&model_rows).map_err(value_err)?;
    let router_doc = emit_router_table(&router_rows).map_err(value_err)?;
    Ok((model_doc.csv, router_doc.csv))
}

/// Confidence discount exp(-beta * |delta|) for a benchmark score whose
/// audit measured a contamination gap of magnitude `delta_abs`.
#[pyfunction]
fn score_confidence(delta_abs: f64, beta: f64) -> PyResult<f64> {
    metrics::score_confidence(delta_abs, beta).map_err(value_err)
}

/// Slope of a (strength, mean score) response curve at the origin:
/// (m(l1) - m(0)) / l1 over the two smallest grid points. The curve must
/// include strength 0.
#[pyfunction]
fn contamination_sensitivity(curve: Vec<(f64, f64)>) -> PyResult<f64> {
    metrics::contamination_sensitivity(&curve).map_err(value_err)
}

/// Run the synthetic-world audit once per contamination strength and return
/// the sweep as a csv string (`lambda,m,mean_gain,se,improve,degrade`).
#[pyfunction]
#[pyo3(signature = (world_path, lambdas, questions = 50, max_routers = 9, replications = 200))]
fn simulate_sweep(
    world_path: &str,
    lambdas: Vec<f64>,
    questions: u32,
    max_routers: u32,
    replications: u32,
) -> PyResult<String> {
    let world = WorldConfig::load(Path::new(world_path)).map_err(value_err)?;
    let sweep = simulator::run_sweep(&world, &lambdas, questions, max_routers, replications)
        .map_err(value_err)?;
    Ok(simulator::sweep_csv(&sweep.rows))
}

#[pymodule]
pub fn benchaudit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(sample_indices, m)?)?;
    m.add_function(wrap_pyfunction!(sample_ids, m)?)?;
    m.add_function(wrap_pyfunction!(extract_answer, m)?)?;
    m.add_function(wrap_pyfunction!(summarize_detail_csv, m)?)?;
    m.add_function(wrap_pyfunction!(score_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(contamination_sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_sweep, m)?)?;
    Ok(())
}
