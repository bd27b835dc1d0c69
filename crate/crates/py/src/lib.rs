//! Python bindings for the `ami_core` simulator.

use std::str::FromStr;

use ami_core::bounds::eval_lower_bound;
use ami_core::cli::{bounds_rows, check_rows, game_rows, sweep_rows};
use ami_core::config::{ReportFormat, RunConfig};
use ami_core::ldp::{keep_probability as keep, DpConfig, Mechanism};
use ami_core::metrics::auc_rank;
use ami_core::report::{render, BOUNDS_SCHEMA, DP_CHECK_SCHEMA, GAME_SCHEMA};
use ami_core::AmiError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

const RUN_ID: &str = "python";

fn to_py(e: AmiError) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse_config(text: &str, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::parse(text).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs `command` ("game", "sweep", "bounds" or "dp-check") on a TOML config and returns the report text.
#[pyfunction]
#[pyo3(signature = (command, config, seed=None, format="csv"))]
fn report(py: Python<'_>, command: &str, config: &str, seed: Option<u64>, format: &str) -> PyResult<String> {
    let cfg = parse_config(config, seed)?;
    let format = ReportFormat::from_str(format).map_err(to_py)?;
    let command = command.to_owned();
    py.detach(move || match command.as_str() {
        "game" => render(GAME_SCHEMA, &game_rows(&cfg, RUN_ID)?, format),
        "sweep" => render(GAME_SCHEMA, &sweep_rows(&cfg, RUN_ID)?, format),
        "bounds" => render(BOUNDS_SCHEMA, &bounds_rows(&cfg)?, format),
        "dp-check" => render(DP_CHECK_SCHEMA, &check_rows(&cfg)?, format),
        other => Err(AmiError::Config(format!("unknown command `{other}`"))),
    })
    .map_err(to_py)
}

/// Plays the configured game; returns (acc, f1, auc, tpr, tnr, advantage).
#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn game_metrics(py: Python<'_>, config: &str, seed: Option<u64>) -> PyResult<(f64, f64, f64, f64, f64, f64)> {
    let cfg = parse_config(config, seed)?;
    let rows = py.detach(move || game_rows(&cfg, RUN_ID)).map_err(to_py)?;
    let r = &rows[0];
    Ok((r.acc, r.f1, r.auc, r.tpr, r.tnr, r.advantage))
}

#[pyfunction]
fn keep_probability(mechanism: &str, epsilon: f64, k: usize) -> PyResult<f64> {
    let m = Mechanism::from_str(mechanism).map_err(to_py)?;
    let cfg = DpConfig::new(m, epsilon, k);
    cfg.validate().map_err(to_py)?;
    Ok(keep(&cfg))
}

/// Rank AUC of positive vs negative scores; NaN when either list is empty.
#[pyfunction]
fn auc(pos: Vec<f64>, neg: Vec<f64>) -> f64 {
    auc_rank(&pos, &neg)
}

#[pyfunction]
fn lower_bound(p_proj: f64, p_box: f64, n: usize, l_x: usize) -> f64 {
    eval_lower_bound(p_proj, p_box, n, l_x)
}

#[pymodule]
fn amisim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(game_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(keep_probability, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(lower_bound, m)?)?;
    Ok(())
}
