//! Python bindings: subcommand runs with JSON reports, plus typed helpers.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nahm_oper::cli_reporting::{self, Command, RunConfig};
use nahm_oper::error::Error;
use nahm_oper::lie_core::{self, C64};
use nahm_oper::tbe_solver::{continuity_solve, kobayashi_hitchin};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::InvalidRank(_) | Error::Domain(_) | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn config_from(config_json: Option<&str>) -> Result<RunConfig, Error> {
    match config_json {
        Some(text) => RunConfig::from_json(text),
        None => Ok(RunConfig::default()),
    }
}

fn oper_config(n: usize, beta: f64, q: Vec<f64>, mesh_count: usize) -> RunConfig {
    let mut cfg = RunConfig { beta, q, ..RunConfig::default() };
    cfg.n = n;
    cfg.mesh.count = mesh_count;
    cfg
}

/// Runs a subcommand and returns `(passed, report_json)`; nothing is written to disk.
fn run_report(command: &str, config_json: Option<&str>) -> Result<(bool, String), Error> {
    let cmd = Command::parse(command)
        .ok_or_else(|| Error::Config { path: "command".into(), msg: format!("unknown subcommand {command:?}") })?;
    let cfg = config_from(config_json)?;
    let outcome = cli_reporting::run(cmd, &cfg)?;
    let report = serde_json::to_string(&outcome.report_json(&cfg)).map_err(|e| Error::Domain(e.to_string()))?;
    Ok((outcome.passed(), report))
}

/// Solve for the oper `(n, beta, q)` and read it back through the flat limit.
fn round_trip(n: usize, beta: f64, q: Vec<f64>, mesh_count: usize) -> Result<Vec<C64>, Error> {
    let cfg = oper_config(n, beta, q, mesh_count);
    cfg.validate()?;
    let sol = continuity_solve(&cfg.oper()?, cfg.mesh.build()?, &cfg.solve_options())?;
    Ok(kobayashi_hitchin(&sol.fields()?, &sol.reference.bg.holo)?.q)
}

#[pyfunction]
#[pyo3(signature = (command, config_json=None))]
fn run(py: Python<'_>, command: &str, config_json: Option<&str>) -> PyResult<(bool, String)> {
    py.detach(|| run_report(command, config_json)).map_err(to_py_err)
}

#[pyfunction]
fn subcommands() -> Vec<&'static str> {
    Command::ALL.iter().map(|c| c.name()).collect()
}

#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string(&RunConfig::default()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn indicial_roots(n: usize) -> PyResult<Vec<f64>> {
    lie_core::indicial_roots(n).map_err(to_py_err)
}

#[pyfunction]
fn casimir_spectrum(n: usize) -> PyResult<Vec<f64>> {
    lie_core::casimir_spectrum(n).map_err(to_py_err)
}

/// Oper coefficients recovered from a continuity solve of `(n, beta, q)`.
#[pyfunction]
#[pyo3(signature = (n, beta, q, mesh_count=200))]
fn kh_round_trip(py: Python<'_>, n: usize, beta: f64, q: Vec<f64>, mesh_count: usize) -> PyResult<Vec<C64>> {
    py.detach(|| round_trip(n, beta, q, mesh_count)).map_err(to_py_err)
}

#[pymodule]
fn nahm_oper_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SCHEMA_VERSION", cli_reporting::SCHEMA_VERSION)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(subcommands, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(indicial_roots, m)?)?;
    m.add_function(wrap_pyfunction!(casimir_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(kh_round_trip, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_runs_and_rejects_bad_input() {
        let (passed, report) = run_report("indicial-roots", Some(r#"{"n": 3, "q": [0.0, 0.0]}"#)).unwrap();
        assert!(passed);
        let v: serde_json::Value = serde_json::from_str(&report).unwrap();
        let roots: Vec<f64> = serde_json::from_value(v["results"]["roots"].clone()).unwrap();
        assert_eq!(roots.len(), 4);
        for (r, want) in roots.iter().zip([-2.0, -1.0, 2.0, 3.0]) {
            assert!((r - want).abs() < 1e-12);
        }
        assert!(matches!(run_report("nope", None), Err(Error::Config { .. })));
        assert!(matches!(run_report("indicial-roots", Some(r#"{"x": 1}"#)), Err(Error::Config { .. })));
    }

    #[test]
    fn round_trip_recovers_q() {
        let q = round_trip(2, 0.2, vec![0.5], 200).unwrap();
        assert!((q[0] - C64::new(0.5, 0.0)).norm() < 1e-4 * 0.5);
        assert!(round_trip(2, 0.2, vec![0.5, 1.0], 200).is_err());
    }
}
