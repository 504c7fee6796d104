//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use hetlmm::dataset::{load_manifest, write_dataset, LmmDataset};
use hetlmm::graph::{fit_graph as core_fit_graph, GraphConfig};
use hetlmm::inference::{infer as core_infer, InferenceConfig, InferenceRecord, Method};
use hetlmm::lasso::{fit_cv, CvConfig};
use hetlmm::mevar::{fit_mevar as core_fit_mevar, MevarConfig};
use hetlmm::sim::{
    gen_lmm_dataset, run_monte_carlo, section5_beta, section5_psi, toy_spec, LmmSpec, SigmaXKind, SimConfig,
};
use hetlmm::varcomp::{run_varcomp_pipeline, VarCompConfig};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py_err(e: hetlmm::Error) -> PyErr {
    if e.is_data_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what}: rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn record_dict<'py>(py: Python<'py>, r: &InferenceRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("coord", r.coord)?;
    d.set_item("beta_hat", r.beta_hat)?;
    d.set_item("beta_db", r.beta_db)?;
    d.set_item("se", r.se())?;
    d.set_item("ci_low", r.ci_low)?;
    d.set_item("ci_high", r.ci_high)?;
    d.set_item("p_value", r.p_value)?;
    Ok(d)
}

fn parse_method(method: &str) -> PyResult<Method> {
    match method {
        "proposed" => Ok(Method::Proposed),
        "baseline" | "dblasso" => Ok(Method::Baseline),
        other => Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    }
}

fn apply_a(cv: &mut CvConfig, a: Option<f64>, a_grid: Option<Vec<f64>>) {
    if let Some(a) = a {
        cv.a_grid = vec![a];
    } else if let Some(g) = a_grid {
        cv.a_grid = g;
    }
}

/// Per-subject responses, fixed-effect designs and a random-effect column map.
#[pyclass(name = "Dataset", module = "hetlmm", frozen)]
struct PyDataset {
    inner: LmmDataset,
}

#[pymethods]
impl PyDataset {
    /// `ys[i]` is subject i's response, `xs[i]` its design (list of rows).
    /// `column_map` picks the X columns carried as random effects (all by default).
    #[new]
    #[pyo3(signature = (ys, xs, column_map=None, subject_ids=None))]
    fn new(
        ys: Vec<Vec<f64>>,
        xs: Vec<Vec<Vec<f64>>>,
        column_map: Option<Vec<usize>>,
        subject_ids: Option<Vec<String>>,
    ) -> PyResult<Self> {
        if ys.len() != xs.len() {
            return Err(PyValueError::new_err(format!("{} responses for {} designs", ys.len(), xs.len())));
        }
        if subject_ids.as_ref().is_some_and(|ids| ids.len() != ys.len()) {
            return Err(PyValueError::new_err("subject_ids length differs from the number of subjects"));
        }
        let mut subjects = Vec::with_capacity(ys.len());
        for (i, (y, x)) in ys.into_iter().zip(&xs).enumerate() {
            let id = subject_ids.as_ref().map_or_else(|| format!("s{i:04}"), |v| v[i].clone());
            subjects.push((id, DVector::from_vec(y), matrix(x, "xs")?));
        }
        let p = subjects.first().map_or(0, |s| s.2.ncols());
        let inner = LmmDataset::new(subjects, column_map.unwrap_or_else(|| (0..p).collect())).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    /// Loads a manifest JSON of per-subject CSV files.
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_manifest(&manifest).map_err(to_py_err)? })
    }

    /// Writes per-subject CSVs and a manifest into `directory`; returns the manifest path.
    fn save(&self, directory: PathBuf) -> PyResult<String> {
        let p = write_dataset(&self.inner, &directory).map_err(to_py_err)?;
        Ok(p.display().to_string())
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    #[getter]
    fn column_map(&self) -> Vec<usize> {
        self.inner.column_map().to_vec()
    }

    fn subject(&self, i: usize) -> PyResult<(String, Vec<f64>, Vec<Vec<f64>>)> {
        let b = self.inner.blocks().get(i).ok_or_else(|| PyValueError::new_err(format!("no subject {i}")))?;
        Ok((b.subject_id.clone(), b.y.iter().copied().collect(), rows_of(&b.x)))
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, p={}, q={}, rows={})",
            self.inner.n(),
            self.inner.p(),
            self.inner.q(),
            self.inner.total_rows()
        )
    }
}

/// Draws one replicate from a built-in generator; returns (dataset, beta, psi, sigma_e2).
#[pyfunction]
#[pyo3(signature = (model="lmm_section5", n=50, m=30, p=20, seed=0, rep=0))]
fn simulate_lmm(
    model: &str,
    n: usize,
    m: usize,
    p: usize,
    seed: u64,
    rep: u64,
) -> PyResult<(PyDataset, Vec<f64>, Vec<f64>, f64)> {
    let spec = match model {
        "lmm_section5" => LmmSpec {
            n,
            m,
            beta: section5_beta(p),
            psi: section5_psi(p),
            sigma_e2: 1.0,
            sigma_x: SigmaXKind::Perturbed,
        },
        "toy_table1" => toy_spec(n, m),
        other => return Err(PyValueError::new_err(format!("unknown model {other:?}"))),
    };
    let (ds, truth) = gen_lmm_dataset(&spec, seed, rep).map_err(to_py_err)?;
    Ok((PyDataset { inner: ds }, truth.beta.as_slice().to_vec(), truth.psi.as_slice().to_vec(), truth.sigma_e2))
}

/// Cross-validated decorrelated LASSO.
#[pyfunction]
#[pyo3(signature = (data, a=None, a_grid=None, folds=5, seed=0))]
fn fit<'py>(
    py: Python<'py>,
    data: &PyDataset,
    a: Option<f64>,
    a_grid: Option<Vec<f64>>,
    folds: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cv = CvConfig { folds, seed, ..Default::default() };
    apply_a(&mut cv, a, a_grid);
    let out = py.detach(|| fit_cv(&data.inner, &cv)).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("beta", out.fit.beta.as_slice().to_vec())?;
    d.set_item("a", out.fit.a)?;
    d.set_item("lambda", out.fit.lambda)?;
    d.set_item("active_set", out.fit.active_set.clone())?;
    d.set_item("converged", out.fit.converged)?;
    d.set_item("cv_grid", out.report.grid.clone())?;
    d.set_item("cv_mse", out.report.cv_mse.clone())?;
    Ok(d)
}

/// De-biased estimates, intervals and p-values for `coords` (all by default).
#[pyfunction]
#[pyo3(signature = (data, coords=None, method="proposed", alpha=0.05, a=None, seed=0))]
fn infer<'py>(
    py: Python<'py>,
    data: &PyDataset,
    coords: Option<Vec<usize>>,
    method: &str,
    alpha: f64,
    a: Option<f64>,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = InferenceConfig::for_method(parse_method(method)?, seed);
    cfg.debias.alpha = alpha;
    apply_a(&mut cfg.cv, a, None);
    let coords = coords.unwrap_or_else(|| (0..data.inner.p()).collect());
    let run = py.detach(|| core_infer(&data.inner, &coords, &cfg)).map_err(to_py_err)?;
    if run.records.is_empty() {
        if let Some((c, why)) = run.failures.first() {
            return Err(PyRuntimeError::new_err(format!("coordinate {c}: {why}")));
        }
    }
    run.records.iter().map(|r| record_dict(py, r)).collect()
}

/// Random-effect variances ψ̂ and noise variance σ̂².
#[pyfunction]
#[pyo3(signature = (data, seed=0))]
fn varcomp<'py>(py: Python<'py>, data: &PyDataset, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let cfg = VarCompConfig::default();
    let est = py.detach(|| run_varcomp_pipeline(&data.inner, seed, &cfg)).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("psi", est.psi_hat.as_slice().to_vec())?;
    d.set_item("sigma_e2", est.sigma_e2_hat)?;
    d.set_item("lambda_theta", est.lambda_theta)?;
    d.set_item("selected", est.selected.clone())?;
    Ok(d)
}

/// Mixed graphical model from per-subject series (each a list of time rows).
#[pyfunction]
#[pyo3(signature = (series, alpha=0.05, seed=0, heterogeneity=false))]
fn fit_graph<'py>(
    py: Python<'py>,
    series: Vec<Vec<Vec<f64>>>,
    alpha: f64,
    seed: u64,
    heterogeneity: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mats = series.iter().map(|s| matrix(s, "series")).collect::<PyResult<Vec<_>>>()?;
    let mut cfg = GraphConfig { alpha, with_heterogeneity: heterogeneity, ..Default::default() };
    cfg.inference.cv.seed = seed;
    let g = py.detach(|| core_fit_graph(&mats, &cfg)).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("strength", rows_of(&g.strength))?;
    d.set_item("p_holm", rows_of(&g.p_holm))?;
    d.set_item("adjacency", g.adjacency.clone())?;
    d.set_item("edges", g.edges())?;
    d.set_item("heterogeneity", g.heterogeneity.as_ref().map(rows_of))?;
    d.set_item("failures", g.failures.clone())?;
    Ok(d)
}

/// Row-wise mixed-effects VAR(1) estimation and inference.
#[pyfunction]
#[pyo3(signature = (series, rows=None, seed=0))]
fn fit_mevar<'py>(
    py: Python<'py>,
    series: Vec<Vec<Vec<f64>>>,
    rows: Option<Vec<usize>>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mats = series.iter().map(|s| matrix(s, "series")).collect::<PyResult<Vec<_>>>()?;
    let mut cfg = MevarConfig { rows, ..Default::default() };
    cfg.inference.cv.seed = seed;
    let fit = py.detach(|| core_fit_mevar(&mats, &cfg)).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("phi_hat", rows_of(&fit.phi_hat))?;
    d.set_item("phi_lasso", rows_of(&fit.phi_lasso))?;
    d.set_item("spectral_norm", fit.spectral_norm)?;
    let entries = fit
        .entries
        .iter()
        .map(|e| {
            let r = record_dict(py, &e.record)?;
            r.set_item("row", e.row)?;
            Ok(r)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("entries", entries)?;
    d.set_item("failures", fit.failures.clone())?;
    Ok(d)
}

/// Runs a Monte Carlo study from a JSON config string; returns the summary as JSON text.
#[pyfunction]
fn run_simulation(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = SimConfig::from_json(config_json).map_err(to_py_err)?;
    let report = py.detach(|| run_monte_carlo(&cfg)).map_err(to_py_err)?;
    let v = serde_json::json!({
        "coords": report.coords,
        "varcomp": report.varcomp,
        "failures": report.failures.len(),
    });
    serde_json::to_string(&v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "hetlmm")]
fn hetlmm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(simulate_lmm, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(varcomp, m)?)?;
    m.add_function(wrap_pyfunction!(fit_graph, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mevar, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
