//! De-biased coordinate inference on top of the decorrelated LASSO.
//!
//! For a target coordinate j the projection of Xⱼ on X₋ⱼ is fitted under the
//! proxy Σ_b (Z column of j removed). With ŵⁱ = Σ_b^{-1/2}(Xⱼ − X₋ⱼκ̂):
//!
//! ```text
//! β̂ⱼ^db = β̂ⱼ + Σᵢ ŵⁱᵀ Σ_b^{-1/2}(yⁱ − Xⁱβ̂) / Σᵢ ŵⁱᵀ Σ_b^{-1/2} Xⱼⁱ
//! V̂     = Σᵢ (ŵⁱᵀ Σ_b^{-1/2}(yⁱ − Xⁱβ̂))² / (Σᵢ ŵⁱᵀ Σ_b^{-1/2} Xⱼⁱ)²
//! ```

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{partition_subjects, LmmDataset, PartitionKind};
use crate::error::{Error, Result};
use crate::lasso::{
    build_problem_with, cross_validate_problems, fit_cv, refit_at, solve_lasso, CvConfig, CvFit, CvMetric, LassoFit,
    ProxyKind,
};
use crate::proxy::{quad_form_theta, ProxyFactor};

/// How the projection penalty λ_κ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    Fixed(f64),
    Cv,
}

#[derive(Debug, Clone)]
pub struct ProjectionFit {
    pub coord: usize,
    pub a: f64,
    pub kappa: DVector<f64>,
    pub w_blocks: Vec<DVector<f64>>,
    pub lambda_kappa: f64,
    /// Per-subject Σ_b factors used for ŵ.
    pub factors: Vec<ProxyFactor>,
}

impl ProjectionFit {
    /// Rebuilds ŵⁱ from κ̂ and the stored proxies.
    pub fn recompute_w(&self, ds: &LmmDataset) -> Result<Vec<DVector<f64>>> {
        let rest: Vec<usize> = (0..ds.p()).filter(|&k| k != self.coord).collect();
        ds.blocks()
            .iter()
            .zip(&self.factors)
            .map(|(b, f)| {
                let resid = b.x.column(self.coord) - b.x.select_columns(rest.iter()) * &self.kappa;
                f.apply_inv_sqrt_vec(&resid)
            })
            .collect()
    }
}

/// Regresses Xⱼ on X₋ⱼ under Σ_b and stores the projection residuals.
pub fn fit_projection(
    ds: &LmmDataset,
    coord: usize,
    a: f64,
    lambda: LambdaChoice,
    cv: &CvConfig,
) -> Result<ProjectionFit> {
    if ds.p() < 2 {
        return Err(Error::InvalidInput("projection needs p >= 2".into()));
    }
    let with_raw = matches!(lambda, LambdaChoice::Cv) && cv.metric == CvMetric::Raw;
    let problem = build_problem_with(ds, a, ProxyKind::SigmaB { coord }, with_raw)?;
    let fit = match lambda {
        LambdaChoice::Fixed(l) => solve_lasso(&problem, l, None, &cv.solver)?,
        LambdaChoice::Cv => {
            let partition = partition_subjects(ds, PartitionKind::CvFolds(cv.folds), cv.seed)?;
            let cfg = cv.clone().with_a(a);
            let report = cross_validate_problems(std::slice::from_ref(&problem), &partition, &cfg)?;
            refit_at(&problem, &report, &cfg)?
        }
    };
    if !fit.converged {
        return Err(Error::NoConvergence(format!("projection for coordinate {coord} at λ = {:.3e}", fit.lambda)));
    }
    let w_blocks = problem.blocks().iter().map(|b| &b.y_tilde - &b.x_tilde * &fit.beta).collect();
    Ok(ProjectionFit {
        coord,
        a,
        kappa: fit.beta,
        w_blocks,
        lambda_kappa: fit.lambda,
        factors: problem.factors().to_vec(),
    })
}

/// Projection for a single-covariate design: κ̂ is empty and ŵⁱ is the
/// decorrelated column itself.
pub fn single_column_projection(ds: &LmmDataset, a: f64) -> Result<ProjectionFit> {
    if ds.p() != 1 {
        return Err(Error::Dimension(format!("expected one covariate, dataset has {}", ds.p())));
    }
    let dropped = ds.z_column_of(0);
    let mut factors = Vec::with_capacity(ds.n());
    let mut w_blocks = Vec::with_capacity(ds.n());
    for b in ds.blocks() {
        let f = crate::proxy::factor_proxy(&b.z, a, dropped)?;
        w_blocks.push(f.apply_inv_sqrt_vec(&b.x.column(0).into_owned())?);
        factors.push(f);
    }
    Ok(ProjectionFit { coord: 0, a, kappa: DVector::zeros(0), w_blocks, lambda_kappa: 0.0, factors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Cluster-level sandwich over subjects.
    #[default]
    Sandwich,
    /// σ̂²·Σ‖Σ_b^{-1/2}ŵⁱ‖² / denom², the classical i.i.d.-noise formula.
    Homoscedastic,
}

/// Vector in the de-biasing denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorTarget {
    /// The target covariate column Xⱼ.
    #[default]
    Covariate,
    /// The response y.
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasOptions {
    pub alpha: f64,
    pub variance: VarianceMode,
    pub target: DenominatorTarget,
    /// Relative floor on |denominator|, scaled by Σᵢ‖Σ_b^{-1/2}targetⁱ‖².
    pub denom_floor: f64,
}

impl Default for DebiasOptions {
    fn default() -> Self {
        Self { alpha: 0.05, variance: VarianceMode::Sandwich, target: DenominatorTarget::Covariate, denom_floor: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub coord: usize,
    pub beta_hat: f64,
    pub beta_db: f64,
    pub v_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub denom: f64,
}

impl InferenceRecord {
    pub fn se(&self) -> f64 {
        self.v_hat.sqrt()
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Upper `q` quantile of N(0,1).
pub fn normal_quantile(q: f64) -> f64 {
    std_normal().inverse_cdf(q)
}

/// Two-sided normal p-value of `est / sqrt(var)`.
pub fn two_sided_p(est: f64, var: f64) -> f64 {
    if var > 0.0 {
        (2.0 * std_normal().sf((est / var.sqrt()).abs())).min(1.0)
    } else if est == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Builds an [`InferenceRecord`] from an estimate and its variance.
pub fn make_record(coord: usize, beta_hat: f64, beta_db: f64, v_hat: f64, denom: f64, alpha: f64) -> InferenceRecord {
    let half = normal_quantile(1.0 - alpha / 2.0) * v_hat.max(0.0).sqrt();
    InferenceRecord {
        coord,
        beta_hat,
        beta_db,
        v_hat,
        ci_low: beta_db - half,
        ci_high: beta_db + half,
        p_value: two_sided_p(beta_db, v_hat),
        denom,
    }
}

/// Per-subject Σ_b^{-1/2}ŵⁱ and the denominator with its floor scale.
fn projected_directions(
    ds: &LmmDataset,
    proj: &ProjectionFit,
    target: DenominatorTarget,
) -> Result<(Vec<DVector<f64>>, f64, f64)> {
    if proj.w_blocks.len() != ds.n() || proj.factors.len() != ds.n() {
        return Err(Error::Dimension("projection fitted on a different subject set".into()));
    }
    let mut us = Vec::with_capacity(ds.n());
    let (mut denom, mut scale) = (0.0, 0.0);
    for ((b, f), w) in ds.blocks().iter().zip(&proj.factors).zip(&proj.w_blocks) {
        let u = f.apply_inv_sqrt_vec(w)?;
        let t = match target {
            DenominatorTarget::Covariate => b.x.column(proj.coord).into_owned(),
            DenominatorTarget::Response => b.y.clone(),
        };
        denom += u.dot(&t);
        scale += f.apply_inv_sqrt_vec(&t)?.norm_squared();
        us.push(u);
    }
    Ok((us, denom, scale))
}

/// De-biased estimate, variance, interval and p-value for `proj.coord`.
pub fn debias(ds: &LmmDataset, fit: &LassoFit, proj: &ProjectionFit, opts: &DebiasOptions) -> Result<InferenceRecord> {
    let coord = proj.coord;
    if fit.beta.len() != ds.p() || coord >= ds.p() {
        return Err(Error::Dimension(format!("fit has {} coefficients, dataset p = {}", fit.beta.len(), ds.p())));
    }
    if fit.a != proj.a {
        return Err(Error::InvalidInput(format!("LASSO fitted at a = {}, projection at a = {}", fit.a, proj.a)));
    }
    let (us, denom, scale) = projected_directions(ds, proj, opts.target)?;
    let floor = opts.denom_floor * scale;
    if !(denom.abs() > floor) {
        return Err(Error::UnidentifiedDirection { coord, denom: denom.abs(), floor });
    }
    let mut num = 0.0;
    let mut meat = 0.0;
    let mut rss = 0.0;
    let mut u_norm = 0.0;
    for (b, u) in ds.blocks().iter().zip(&us) {
        let r = &b.y - &b.x * &fit.beta;
        let s = u.dot(&r);
        num += s;
        meat += s * s;
        rss += r.norm_squared();
        u_norm += u.norm_squared();
    }
    let v_hat = match opts.variance {
        VarianceMode::Sandwich => meat / (denom * denom),
        VarianceMode::Homoscedastic => {
            let dof = ds.total_rows().saturating_sub(fit.active_set.len()).max(1);
            rss / dof as f64 * u_norm / (denom * denom)
        }
    };
    Ok(make_record(coord, fit.beta[coord], fit.beta[coord] + num / denom, v_hat, denom, opts.alpha))
}

/// Variance of the de-biased estimator under known variance components.
pub fn oracle_variance(ds: &LmmDataset, proj: &ProjectionFit, psi: &DVector<f64>, sigma_e2: f64) -> Result<f64> {
    let (_, denom, _) = projected_directions(ds, proj, DenominatorTarget::Covariate)?;
    let mut total = 0.0;
    for ((b, f), w) in ds.blocks().iter().zip(&proj.factors).zip(&proj.w_blocks) {
        total += quad_form_theta(f, &b.z, psi, sigma_e2, w)?;
    }
    Ok(total / (denom * denom))
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm_adjust(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("p-value {bad} outside [0, 1]")));
    }
    let k = p.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; k];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((k - rank) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    Ok(out)
}

/// Holm adjustment that skips NaN entries (failed tests stay NaN).
pub fn holm_adjust_partial(p: &[f64]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..p.len()).filter(|&i| !p[i].is_nan()).collect();
    let adj = holm_adjust(&idx.iter().map(|&i| p[i]).collect::<Vec<_>>())?;
    let mut out = vec![f64::NAN; p.len()];
    for (&i, v) in idx.iter().zip(adj) {
        out[i] = v;
    }
    Ok(out)
}

/// Built-in inference procedures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Proxy decorrelation with cross-validated a and sandwich variance.
    Proposed,
    /// a = 0 de-biased LASSO with the i.i.d.-noise variance.
    Baseline,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Baseline => "dblasso",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub cv: CvConfig,
    pub projection_lambda: LambdaChoice,
    pub debias: DebiasOptions,
}

impl InferenceConfig {
    pub fn for_method(method: Method, seed: u64) -> Self {
        let mut cv = CvConfig { seed, ..Default::default() };
        let mut debias = DebiasOptions::default();
        if method == Method::Baseline {
            cv.a_grid = vec![0.0];
            debias.variance = VarianceMode::Homoscedastic;
        }
        Self { cv, projection_lambda: LambdaChoice::Cv, debias }
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self::for_method(Method::Proposed, 0)
    }
}

#[derive(Debug, Clone)]
pub struct InferenceRun {
    pub cv: CvFit,
    pub records: Vec<InferenceRecord>,
    /// Oracle variance per record (NaN unless true components were supplied).
    pub oracle_v: Vec<f64>,
    /// Coordinates whose inference failed, with the reason.
    pub failures: Vec<(usize, String)>,
}

/// Fits the LASSO by CV and runs de-biased inference on `coords`.
pub fn infer(ds: &LmmDataset, coords: &[usize], cfg: &InferenceConfig) -> Result<InferenceRun> {
    infer_with_oracle(ds, coords, cfg, None)
}

/// As [`infer`]; with `oracle = Some((ψ, σ²))` also evaluates the oracle variance.
pub fn infer_with_oracle(
    ds: &LmmDataset,
    coords: &[usize],
    cfg: &InferenceConfig,
    oracle: Option<(&DVector<f64>, f64)>,
) -> Result<InferenceRun> {
    if let Some(&c) = coords.iter().find(|&&c| c >= ds.p()) {
        return Err(Error::Dimension(format!("coordinate {c} out of range for p = {}", ds.p())));
    }
    let cv = fit_cv(ds, &cfg.cv)?;
    if !cv.fit.converged {
        return Err(Error::NoConvergence(format!("LASSO at λ = {:.3e}", cv.fit.lambda)));
    }
    let outcomes: Vec<(usize, Result<(InferenceRecord, f64)>)> = coords
        .par_iter()
        .map(|&c| {
            let proj = if ds.p() == 1 {
                single_column_projection(ds, cv.fit.a)
            } else {
                fit_projection(ds, c, cv.fit.a, cfg.projection_lambda, &cfg.cv)
            };
            let r = proj.and_then(|proj| {
                let rec = debias(ds, &cv.fit, &proj, &cfg.debias)?;
                let v = match oracle {
                    Some((psi, s2)) => oracle_variance(ds, &proj, psi, s2)?,
                    None => f64::NAN,
                };
                Ok((rec, v))
            });
            (c, r)
        })
        .collect();
    let mut records = Vec::new();
    let mut oracle_v = Vec::new();
    let mut failures = Vec::new();
    for (c, r) in outcomes {
        match r {
            Ok((rec, v)) => {
                records.push(rec);
                oracle_v.push(v);
            }
            Err(e) => failures.push((c, e.to_string())),
        }
    }
    Ok(InferenceRun { cv, records, oracle_v, failures })
}

/// Writes `coord, beta_hat, beta_db, se, ci_low, ci_high, p_value, p_holm`.
pub fn write_inference_csv(path: &Path, records: &[InferenceRecord]) -> Result<()> {
    let holm = holm_adjust(&records.iter().map(|r| r.p_value).collect::<Vec<_>>())?;
    let io = |e| Error::Io { path: path.to_path_buf(), source: e };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "coord,beta_hat,beta_db,se,ci_low,ci_high,p_value,p_holm").map_err(io)?;
    for (r, h) in records.iter().zip(holm) {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.coord,
            r.beta_hat,
            r.beta_db,
            r.se(),
            r.ci_low,
            r.ci_high,
            r.p_value,
            h
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}
