//! Monte Carlo driver: generate, fit, infer, score.

pub mod generators;

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LmmDataset;
use crate::error::{Error, Result};
use crate::inference::{infer_with_oracle, InferenceConfig, Method};
use crate::lasso::{CvConfig, CvMetric};
use crate::mevar::build_row_problem;
use crate::rng::{derive_key, Stream};
use crate::varcomp::{run_varcomp_pipeline, VarCompConfig};

pub use generators::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimModel {
    LmmSection5,
    ToyTable1,
    #[serde(rename = "mevar_appendix_e", alias = "mevar_appendixE")]
    MevarAppendixE,
    /// Mixed model with user-supplied β*, ψ*, σ² and i.i.d. covariates.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub model: SimModel,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub p: Option<usize>,
    /// Series length for the VAR model.
    pub t: Option<usize>,
    pub reps: usize,
    pub seed: u64,
    pub beta_star: Option<Vec<f64>>,
    pub psi_star: Option<Vec<f64>>,
    pub sigma_e2_star: Option<f64>,
    pub methods: Vec<Method>,
    /// a candidates for the proposed method.
    pub a_grid: Option<Vec<f64>>,
    pub alpha: f64,
    /// Coordinates to infer (all when absent).
    pub coords: Option<Vec<usize>>,
    pub folds: usize,
    pub n_lambdas: usize,
    /// Held-out score for CV (raw for the VAR model, decorrelated otherwise).
    pub cv_metric: Option<CvMetric>,
    pub varcomp: bool,
    /// Also evaluate the oracle variance from the true components.
    pub oracle: bool,
    /// Row of Φ analysed in the VAR model.
    pub row: usize,
    /// Seed of the VAR population structure (defaults to `seed`).
    pub structure_seed: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            model: SimModel::LmmSection5,
            n: None,
            m: None,
            p: None,
            t: None,
            reps: 200,
            seed: 0,
            beta_star: None,
            psi_star: None,
            sigma_e2_star: None,
            methods: vec![Method::Proposed, Method::Baseline],
            a_grid: None,
            alpha: 0.05,
            coords: None,
            folds: 5,
            n_lambdas: 50,
            cv_metric: None,
            varcomp: false,
            oracle: false,
            row: 0,
            structure_seed: None,
        }
    }
}

fn config_err(pointer: &str, msg: impl Into<String>) -> Error {
    Error::Config { pointer: pointer.to_string(), msg: msg.into() }
}

impl SimConfig {
    /// Parses JSON, reporting the offending field as a JSON pointer.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = crate::parse_config(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::from_json(&text)
    }

    pub fn n(&self) -> usize {
        self.n.unwrap_or(match self.model {
            SimModel::ToyTable1 => 20,
            SimModel::MevarAppendixE => 40,
            _ => 50,
        })
    }

    pub fn m(&self) -> usize {
        self.m.unwrap_or(match self.model {
            SimModel::ToyTable1 => 10,
            _ => 30,
        })
    }

    pub fn p(&self) -> usize {
        match self.model {
            SimModel::ToyTable1 => 6,
            SimModel::MevarAppendixE => self.p.unwrap_or(30),
            SimModel::Custom => self.beta_star.as_ref().map_or(0, Vec::len),
            SimModel::LmmSection5 => self.p.unwrap_or(20),
        }
    }

    pub fn cv_metric(&self) -> CvMetric {
        self.cv_metric.unwrap_or(match self.model {
            SimModel::MevarAppendixE => CvMetric::Raw,
            _ => CvMetric::Decorrelated,
        })
    }

    pub fn t(&self) -> usize {
        self.t.unwrap_or(50)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(config_err("/reps", "must be at least 1"));
        }
        if self.n() < 1 {
            return Err(config_err("/n", "must be positive"));
        }
        if self.m() < 1 {
            return Err(config_err("/m", "must be positive"));
        }
        if self.methods.is_empty() {
            return Err(config_err("/methods", "at least one method is required"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(config_err("/alpha", "must lie in (0, 1)"));
        }
        if self.folds < 2 {
            return Err(config_err("/folds", "must be at least 2"));
        }
        if self.n_lambdas < 1 {
            return Err(config_err("/n_lambdas", "must be positive"));
        }
        let p = self.p();
        match self.model {
            SimModel::ToyTable1 => {
                if self.p.is_some_and(|v| v != 6) {
                    return Err(config_err("/p", "the toy model has 6 covariates"));
                }
            }
            SimModel::MevarAppendixE => {
                if self.t() < 3 {
                    return Err(config_err("/t", "must be at least 3"));
                }
                if self.row >= p {
                    return Err(config_err("/row", format!("must be below p = {p}")));
                }
            }
            SimModel::Custom => {
                if self.beta_star.is_none() {
                    return Err(config_err("/beta_star", "required for the custom model"));
                }
                if self.psi_star.is_none() {
                    return Err(config_err("/psi_star", "required for the custom model"));
                }
            }
            SimModel::LmmSection5 => {}
        }
        if p < 2 {
            return Err(config_err("/p", "must be at least 2"));
        }
        if let Some(b) = &self.beta_star {
            if b.len() != p {
                return Err(config_err("/beta_star", format!("expected {p} entries, got {}", b.len())));
            }
        }
        if let Some(s) = &self.psi_star {
            if s.len() != p {
                return Err(config_err("/psi_star", format!("expected {p} entries, got {}", s.len())));
            }
            if let Some(i) = s.iter().position(|&v| !(v >= 0.0)) {
                return Err(config_err(&format!("/psi_star/{i}"), "variances must be nonnegative"));
            }
        }
        if self.sigma_e2_star.is_some_and(|v| !(v >= 0.0)) {
            return Err(config_err("/sigma_e2_star", "must be nonnegative"));
        }
        if let Some(a) = &self.a_grid {
            if a.is_empty() {
                return Err(config_err("/a_grid", "must not be empty"));
            }
            if let Some(i) = a.iter().position(|&v| !(v >= 0.0)) {
                return Err(config_err(&format!("/a_grid/{i}"), "must be nonnegative"));
            }
        }
        if let Some(c) = &self.coords {
            if let Some(i) = c.iter().position(|&v| v >= p) {
                return Err(config_err(&format!("/coords/{i}"), format!("must be below p = {p}")));
            }
            if let Some(i) = (1..c.len()).find(|&i| c[..i].contains(&c[i])) {
                return Err(config_err(&format!("/coords/{i}"), "duplicate coordinate"));
            }
        }
        if self.varcomp && self.model == SimModel::MevarAppendixE {
            return Err(config_err("/varcomp", "variance components are only simulated for the mixed models"));
        }
        Ok(())
    }

    /// Inference settings used for `method` in replicate `rep`.
    pub fn inference_config(&self, method: Method, rep: u64) -> InferenceConfig {
        let seed = derive_key(&[self.seed, rep, Stream::Partition as u64]);
        let mut cfg = InferenceConfig::for_method(method, seed);
        cfg.cv.folds = self.folds;
        cfg.cv.n_lambdas = self.n_lambdas;
        cfg.cv.metric = self.cv_metric();
        if method == Method::Proposed {
            if let Some(a) = &self.a_grid {
                cfg.cv.a_grid = a.clone();
            }
        }
        cfg.debias.alpha = self.alpha;
        cfg
    }
}

/// A resolved data-generating process.
#[derive(Debug, Clone)]
pub enum Scenario {
    Lmm(LmmSpec),
    Mevar { structure: MevarStructure, n: usize, t: usize, row: usize },
}

impl Scenario {
    pub fn from_config(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.p();
        let vec = |v: &Option<Vec<f64>>, d: DVector<f64>| v.as_ref().map_or(d, |v| DVector::from_column_slice(v));
        Ok(match cfg.model {
            SimModel::LmmSection5 => Scenario::Lmm(LmmSpec {
                n: cfg.n(),
                m: cfg.m(),
                beta: vec(&cfg.beta_star, section5_beta(p)),
                psi: vec(&cfg.psi_star, section5_psi(p)),
                sigma_e2: cfg.sigma_e2_star.unwrap_or(1.0),
                sigma_x: SigmaXKind::Perturbed,
            }),
            SimModel::ToyTable1 => {
                let mut spec = toy_spec(cfg.n(), cfg.m());
                spec.beta = vec(&cfg.beta_star, spec.beta);
                spec.psi = vec(&cfg.psi_star, spec.psi);
                spec.sigma_e2 = cfg.sigma_e2_star.unwrap_or(1.0);
                Scenario::Lmm(spec)
            }
            SimModel::Custom => Scenario::Lmm(LmmSpec {
                n: cfg.n(),
                m: cfg.m(),
                beta: vec(&cfg.beta_star, DVector::zeros(p)),
                psi: vec(&cfg.psi_star, DVector::zeros(p)),
                sigma_e2: cfg.sigma_e2_star.unwrap_or(1.0),
                sigma_x: SigmaXKind::Identity,
            }),
            SimModel::MevarAppendixE => Scenario::Mevar {
                structure: gen_mevar_structure(p, cfg.structure_seed.unwrap_or(cfg.seed), 0.05)?,
                n: cfg.n(),
                t: cfg.t(),
                row: cfg.row,
            },
        })
    }

    /// True coefficients and variance components of the analysed regression.
    pub fn truth(&self) -> Truth {
        match self {
            Scenario::Lmm(s) => Truth { beta: s.beta.clone(), psi: s.psi.clone(), sigma_e2: s.sigma_e2 },
            Scenario::Mevar { structure, row, .. } => Truth {
                beta: structure.phi.row(*row).transpose(),
                psi: structure.sigma_gamma2.row(*row).transpose(),
                sigma_e2: structure.sigma_eps2,
            },
        }
    }

    /// Data set of replicate `rep`, and the number of Γ shrink steps (VAR only).
    pub fn generate(&self, seed: u64, rep: u64) -> Result<(LmmDataset, usize)> {
        match self {
            Scenario::Lmm(spec) => Ok((gen_lmm_dataset(spec, seed, rep)?.0, 0)),
            Scenario::Mevar { structure, n, t, row } => {
                let (series, shrinks) = gen_mevar_series(structure, *n, *t, seed, rep);
                Ok((build_row_problem(&series, *row, false)?, shrinks))
            }
        }
    }
}

/// Matthews correlation coefficient; 0 when any margin is empty.
pub fn mcc(selected: &[bool], truth: &[bool]) -> Result<f64> {
    if selected.len() != truth.len() {
        return Err(Error::Dimension(format!("{} selections for {} truths", selected.len(), truth.len())));
    }
    let (mut tp, mut tn, mut fp, mut fne) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &t) in selected.iter().zip(truth) {
        match (s, t) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fne += 1.0,
        }
    }
    let den: f64 = (tp + fp) * (tp + fne) * (tn + fp) * (tn + fne);
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fne) / den.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub method: Method,
    pub coord: usize,
    pub truth: f64,
    pub beta_hat: f64,
    pub beta_db: f64,
    pub se: f64,
    pub p_value: f64,
    pub covers: bool,
    pub rejects: bool,
    pub oracle_v: f64,
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub rep: usize,
    pub stage: String,
    pub coord: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarcompRecord {
    pub rep: usize,
    pub psi_error: f64,
    pub sigma_e2_hat: f64,
    pub mcc: f64,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordSummary {
    pub method: Method,
    pub coord: usize,
    pub truth: f64,
    pub psi: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Type-I error when `truth == 0`, power otherwise.
    pub rejection_rate: f64,
    pub coverage: f64,
    pub rmse: f64,
    /// Median of V̂/V (NaN without oracle variances).
    pub median_v_ratio: f64,
}

impl CoordSummary {
    pub fn is_null(&self) -> bool {
        self.truth == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarcompSummary {
    pub n_ok: usize,
    pub n_failed: usize,
    pub psi_error_median: f64,
    pub psi_rmse: f64,
    pub sigma_e2_rmse: f64,
    pub mcc_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub coords: Vec<CoordSummary>,
    pub varcomp: Option<VarcompSummary>,
    pub replicates: Vec<ReplicateRecord>,
    pub varcomp_replicates: Vec<VarcompRecord>,
    pub failures: Vec<FailureRecord>,
    pub gamma_shrinks: usize,
}

impl SimReport {
    pub fn summary(&self, method: Method, coord: usize) -> Option<&CoordSummary> {
        self.coords.iter().find(|c| c.method == method && c.coord == coord)
    }
}

struct ReplicateOutcome {
    records: Vec<ReplicateRecord>,
    failures: Vec<FailureRecord>,
    varcomp: Option<VarcompRecord>,
    shrinks: usize,
}

fn run_replicate(cfg: &SimConfig, scen: &Scenario, truth: &Truth, coords: &[usize], rep: usize) -> ReplicateOutcome {
    let mut out = ReplicateOutcome { records: Vec::new(), failures: Vec::new(), varcomp: None, shrinks: 0 };
    let fail = |stage: &str, coord: Option<usize>, reason: String| FailureRecord {
        rep,
        stage: stage.to_string(),
        coord,
        reason,
    };
    let ds = match scen.generate(cfg.seed, rep as u64) {
        Ok((ds, shrinks)) => {
            out.shrinks = shrinks;
            ds
        }
        Err(e) => {
            for &method in &cfg.methods {
                for &c in coords {
                    out.failures.push(fail(method.name(), Some(c), format!("generation: {e}")));
                }
            }
            return out;
        }
    };
    let oracle = cfg.oracle.then_some((&truth.psi, truth.sigma_e2));
    // An empty coordinate list makes a variance-components-only study.
    let methods: &[Method] = if coords.is_empty() { &[] } else { &cfg.methods };
    for &method in methods {
        let icfg = cfg.inference_config(method, rep as u64);
        match infer_with_oracle(&ds, coords, &icfg, oracle) {
            Ok(run) => {
                for (rec, v) in run.records.iter().zip(&run.oracle_v) {
                    let t = truth.beta[rec.coord];
                    out.records.push(ReplicateRecord {
                        rep,
                        method,
                        coord: rec.coord,
                        truth: t,
                        beta_hat: rec.beta_hat,
                        beta_db: rec.beta_db,
                        se: rec.se(),
                        p_value: rec.p_value,
                        covers: rec.covers(t),
                        rejects: rec.rejects(cfg.alpha),
                        oracle_v: *v,
                        a: run.cv.fit.a,
                    });
                }
                for (c, reason) in run.failures {
                    out.failures.push(fail(method.name(), Some(c), reason));
                }
            }
            Err(e) => {
                for &c in coords {
                    out.failures.push(fail(method.name(), Some(c), e.to_string()));
                }
            }
        }
    }
    if cfg.varcomp {
        let vcfg = VarCompConfig {
            cv: CvConfig {
                a_grid: cfg.a_grid.clone().unwrap_or_else(|| CvConfig::default().a_grid),
                folds: cfg.folds,
                n_lambdas: cfg.n_lambdas,
                ..Default::default()
            },
            ..Default::default()
        };
        let vseed = derive_key(&[cfg.seed, rep as u64, Stream::Partition as u64, 3]);
        match run_varcomp_pipeline(&ds, vseed, &vcfg) {
            Ok(est) => {
                let selected: Vec<bool> = est.psi_hat.iter().map(|&v| v != 0.0).collect();
                let nonzero: Vec<bool> = truth.psi.iter().map(|&v| v != 0.0).collect();
                out.varcomp = Some(VarcompRecord {
                    rep,
                    psi_error: (&est.psi_hat - &truth.psi).norm(),
                    sigma_e2_hat: est.sigma_e2_hat,
                    mcc: mcc(&selected, &nonzero).unwrap_or(f64::NAN),
                    selected: est.selected.len(),
                });
            }
            Err(e) => out.failures.push(fail("varcomp", None, e.to_string())),
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}

/// Runs all replicates and aggregates per method and coordinate.
pub fn run_monte_carlo(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let scen = Scenario::from_config(cfg)?;
    let truth = scen.truth();
    let coords: Vec<usize> = cfg.coords.clone().unwrap_or_else(|| (0..cfg.p()).collect());
    let outcomes: Vec<ReplicateOutcome> =
        (0..cfg.reps).into_par_iter().map(|rep| run_replicate(cfg, &scen, &truth, &coords, rep)).collect();

    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    let mut varcomp_replicates = Vec::new();
    let mut gamma_shrinks = 0;
    for o in outcomes {
        replicates.extend(o.records);
        failures.extend(o.failures);
        varcomp_replicates.extend(o.varcomp);
        gamma_shrinks += o.shrinks;
    }

    let mut summaries = Vec::new();
    for &method in &cfg.methods {
        for &c in &coords {
            let rs: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.method == method && r.coord == c).collect();
            let n_ok = rs.len();
            let rate = |f: &dyn Fn(&ReplicateRecord) -> bool| {
                if n_ok == 0 {
                    f64::NAN
                } else {
                    rs.iter().filter(|r| f(r)).count() as f64 / n_ok as f64
                }
            };
            let mse = if n_ok == 0 {
                f64::NAN
            } else {
                rs.iter().map(|r| (r.beta_db - r.truth).powi(2)).sum::<f64>() / n_ok as f64
            };
            summaries.push(CoordSummary {
                method,
                coord: c,
                truth: truth.beta[c],
                psi: truth.psi[c],
                n_ok,
                n_failed: cfg.reps - n_ok,
                rejection_rate: rate(&|r| r.rejects),
                coverage: rate(&|r| r.covers),
                rmse: mse.sqrt(),
                median_v_ratio: median(rs.iter().map(|r| r.se * r.se / r.oracle_v).collect()),
            });
        }
    }

    let varcomp = cfg.varcomp.then(|| {
        let k = varcomp_replicates.len();
        let mean = |f: &dyn Fn(&VarcompRecord) -> f64| {
            if k == 0 {
                f64::NAN
            } else {
                varcomp_replicates.iter().map(f).sum::<f64>() / k as f64
            }
        };
        VarcompSummary {
            n_ok: k,
            n_failed: cfg.reps - k,
            psi_error_median: median(varcomp_replicates.iter().map(|r| r.psi_error).collect()),
            psi_rmse: mean(&|r| r.psi_error * r.psi_error).sqrt(),
            sigma_e2_rmse: mean(&|r| (r.sigma_e2_hat - truth.sigma_e2).powi(2)).sqrt(),
            mcc_mean: mean(&|r| r.mcc),
        }
    });

    Ok(SimReport {
        config: cfg.clone(),
        coords: summaries,
        varcomp,
        replicates,
        varcomp_replicates,
        failures,
        gamma_shrinks,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Writes summary.csv, long.csv, replicates.csv, failures.csv, varcomp.csv
/// (when present) and summary.json into `dir`; returns the written paths.
pub fn write_report(report: &SimReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut written = Vec::new();
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::Io { path: p.clone(), source: e }
    };

    let path = dir.join("summary.csv");
    let mut f = create(&path)?;
    writeln!(f, "method,coord,truth,psi,kind,n_ok,n_failed,rejection_rate,coverage,rmse,median_v_ratio")
        .map_err(io(&path))?;
    for c in &report.coords {
        let kind = if c.is_null() { "type_I" } else { "power" };
        writeln!(
            f,
            "{},{},{},{},{kind},{},{},{},{},{},{}",
            c.method.name(),
            c.coord,
            c.truth,
            c.psi,
            c.n_ok,
            c.n_failed,
            c.rejection_rate,
            c.coverage,
            c.rmse,
            c.median_v_ratio
        )
        .map_err(io(&path))?;
    }
    f.flush().map_err(io(&path))?;
    written.push(path);

    let path = dir.join("long.csv");
    let mut f = create(&path)?;
    writeln!(f, "method,metric,coordinate,value").map_err(io(&path))?;
    for c in &report.coords {
        let kind = if c.is_null() { "type_I" } else { "power" };
        for (metric, v) in [(kind, c.rejection_rate), ("coverage", c.coverage), ("rmse", c.rmse)] {
            writeln!(f, "{},{metric},{},{v}", c.method.name(), c.coord).map_err(io(&path))?;
        }
    }
    if let Some(v) = &report.varcomp {
        for (metric, val) in [
            ("psi_error_median", v.psi_error_median),
            ("psi_rmse", v.psi_rmse),
            ("sigma_e2_rmse", v.sigma_e2_rmse),
            ("mcc", v.mcc_mean),
        ] {
            writeln!(f, "varcomp,{metric},,{val}").map_err(io(&path))?;
        }
    }
    f.flush().map_err(io(&path))?;
    written.push(path);

    let path = dir.join("replicates.csv");
    let mut f = create(&path)?;
    writeln!(f, "rep,method,coord,truth,beta_hat,beta_db,se,p_value,covers,rejects,oracle_v,a").map_err(io(&path))?;
    for r in &report.replicates {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.rep,
            r.method.name(),
            r.coord,
            r.truth,
            r.beta_hat,
            r.beta_db,
            r.se,
            r.p_value,
            u8::from(r.covers),
            u8::from(r.rejects),
            r.oracle_v,
            r.a
        )
        .map_err(io(&path))?;
    }
    f.flush().map_err(io(&path))?;
    written.push(path);

    let path = dir.join("failures.csv");
    let mut f = create(&path)?;
    writeln!(f, "rep,stage,coord,reason").map_err(io(&path))?;
    for r in &report.failures {
        let coord = r.coord.map_or(String::new(), |c| c.to_string());
        writeln!(f, "{},{},{coord},\"{}\"", r.rep, r.stage, r.reason.replace('"', "'")).map_err(io(&path))?;
    }
    f.flush().map_err(io(&path))?;
    written.push(path);

    if !report.varcomp_replicates.is_empty() {
        let path = dir.join("varcomp.csv");
        let mut f = create(&path)?;
        writeln!(f, "rep,psi_error,sigma_e2_hat,mcc,selected").map_err(io(&path))?;
        for r in &report.varcomp_replicates {
            writeln!(f, "{},{},{},{},{}", r.rep, r.psi_error, r.sigma_e2_hat, r.mcc, r.selected).map_err(io(&path))?;
        }
        f.flush().map_err(io(&path))?;
        written.push(path);
    }

    let path = dir.join("summary.json");
    let json = serde_json::json!({
        "config": report.config,
        "coords": report.coords,
        "varcomp": report.varcomp,
        "failures": report.failures.len(),
        "gamma_shrinks": report.gamma_shrinks,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(io(&path))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcc_examples() {
        let t = [true, false, true, false];
        assert_eq!(mcc(&t, &t).unwrap(), 1.0);
        let inv: Vec<bool> = t.iter().map(|v| !v).collect();
        assert_eq!(mcc(&inv, &t).unwrap(), -1.0);
        assert_eq!(mcc(&[true, true, false, false], &t).unwrap(), 0.0);
        assert_eq!(mcc(&[false; 4], &t).unwrap(), 0.0);
        assert!(mcc(&[true], &t).is_err());
    }

    #[test]
    fn config_pointer_errors() {
        let e = SimConfig::from_json(r#"{"reps": "x"}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { pointer, .. } if pointer == "/reps"), "{e}");
        let e = SimConfig::from_json(r#"{"a_grid": [1.0, "b"]}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { pointer, .. } if pointer == "/a_grid/1"), "{e}");
        let e = SimConfig::from_json(r#"{"reps": 0}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { pointer, .. } if pointer == "/reps"), "{e}");
        let e = SimConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
        let e = SimConfig::from_json(r#"{"model": "custom", "beta_star": [1, 0]}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { pointer, .. } if pointer == "/psi_star"), "{e}");
        let e = SimConfig::from_json(r#"{"coords": [1, 3, 1]}"#).unwrap_err();
        assert!(matches!(&e, Error::Config { pointer, .. } if pointer == "/coords/2"), "{e}");
        let ok = SimConfig::from_json(r#"{"model": "toy_table1", "reps": 3}"#).unwrap();
        assert_eq!((ok.n(), ok.m(), ok.p()), (20, 10, 6));
    }

    #[test]
    fn tiny_run_rates_are_fractions() {
        let cfg = SimConfig {
            model: SimModel::Custom,
            n: Some(8),
            m: Some(6),
            reps: 2,
            beta_star: Some(vec![3.0, 0.0, 0.0]),
            psi_star: Some(vec![0.0, 0.0, 0.0]),
            sigma_e2_star: Some(0.25),
            folds: 2,
            n_lambdas: 10,
            a_grid: Some(vec![1.0]),
            oracle: true,
            varcomp: true,
            ..Default::default()
        };
        let r = run_monte_carlo(&cfg).unwrap();
        for c in &r.coords {
            assert!(c.n_ok + c.n_failed == 2);
            if c.n_ok == 2 {
                assert!([0.0, 0.5, 1.0].contains(&c.rejection_rate));
            }
        }
        let s = r.summary(Method::Proposed, 0).unwrap();
        assert_eq!(s.rejection_rate, 1.0);
        let again = run_monte_carlo(&cfg).unwrap();
        assert_eq!(r.replicates, again.replicates);
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&r, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
    }
}
