//! Python bindings: the gradient-algebra kernels plus a configurable
//! experiment runner. Records cross the boundary as JSON strings; simple
//! vectors and scalars map to native Python types.
//!
//! Build with `cargo build -p glad-py --release`; the resulting
//! `libglad_py.so` imports as `glad_py` once renamed (see
//! `python/smoke_test.py`).

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use glad_core::bench::{export_samples_csv, generate_task, save_bundle};
use glad_core::harness::{
    apply_kv, load_config, run_ablation_grid, run_experiment, ExperimentConfig,
};

fn err(e: glad_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Cosine annealing learning rate: base · (1 + cos(π·t/T)) / 2.
#[pyfunction]
fn cosine_lr(t: usize, total: usize, base: f64) -> PyResult<f64> {
    glad_core::optim::cosine_lr(t, total, base).map_err(err)
}

/// Harmonic mean of base and novel accuracies (percent).
#[pyfunction]
fn harmonic_mean(base: f64, novel: f64) -> PyResult<f64> {
    glad_core::metrics::harmonic_mean(base, novel).map_err(err)
}

/// SAM perturbation ε = ρ·g/‖g‖₂; None when ‖g‖ is numerically zero.
#[pyfunction]
fn sam_perturbation(grad: Vec<f64>, rho: f64) -> PyResult<Option<Vec<f64>>> {
    glad_core::optim::sam_perturbation(&grad, rho).map_err(err)
}

/// Conflict-filtered projection; returns (g_out, projected).
#[pyfunction]
#[pyo3(signature = (g, g_prime, delta = 1e-12))]
fn project_conflict(g: Vec<f64>, g_prime: Vec<f64>, delta: f64) -> PyResult<(Vec<f64>, bool)> {
    glad_core::optim::project_conflict(
        &g,
        &g_prime,
        delta,
        glad_core::optim::ProjectionScope::Global,
        &[],
    )
    .map_err(err)
}

/// g_f = (1 − α)·g + α·g'.
#[pyfunction]
fn fuse_gradients(g: Vec<f64>, g_prime: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    glad_core::optim::fuse_gradients(&g, &g_prime, alpha).map_err(err)
}

/// A configurable experiment: pretrain (or cached) → few-shot adapt →
/// evaluate. Mirrors the `glad` CLI; keys follow the flat config-file
/// schema (e.g. `gradreg.alpha`).
#[pyclass]
struct Experiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[new]
    fn new() -> Self {
        Experiment {
            cfg: ExperimentConfig::default(),
        }
    }

    /// The reference desk-scale configuration used by the acceptance suite.
    #[staticmethod]
    fn reference() -> Self {
        Experiment {
            cfg: ExperimentConfig::reference(),
        }
    }

    /// Load a flat `key = value` config file.
    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Experiment {
            cfg: load_config(&path).map_err(err)?,
        })
    }

    /// Override one config key, e.g. `set("gradreg.alpha", "0.5")`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        apply_kv(&mut self.cfg, key, value).map_err(err)
    }

    /// Full configuration as JSON.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.cfg).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Stable content hash of the configuration.
    fn hash(&self) -> PyResult<String> {
        self.cfg.hash().map_err(err)
    }

    /// Run the experiment; returns the run record as JSON.
    fn run(&self, out_dir: PathBuf) -> PyResult<String> {
        let record = run_experiment(&self.cfg, &out_dir).map_err(err)?;
        serde_json::to_string_pretty(&record).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Run the five-row ablation grid; returns the records as a JSON list.
    fn ablate(&self, out_dir: PathBuf) -> PyResult<String> {
        let records = run_ablation_grid(&self.cfg, &out_dir).map_err(err)?;
        serde_json::to_string_pretty(&records).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Generate the configured task bundle file (optionally with a CSV of
    /// the labeled splits).
    #[pyo3(signature = (path, csv = None))]
    fn gen_task(&self, path: PathBuf, csv: Option<PathBuf>) -> PyResult<()> {
        let bundle = generate_task(&self.cfg.task).map_err(err)?;
        save_bundle(Path::new(&path), &bundle).map_err(err)?;
        if let Some(csv) = csv {
            export_samples_csv(&bundle, &csv).map_err(err)?;
        }
        Ok(())
    }
}

#[pymodule]
fn glad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(sam_perturbation, m)?)?;
    m.add_function(wrap_pyfunction!(project_conflict, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_gradients, m)?)?;
    m.add_class::<Experiment>()?;
    Ok(())
}
