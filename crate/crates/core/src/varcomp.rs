//! Variance components by penalized second moments.
//!
//! With residuals r̂ᵢ and Aₗⁱ = ZₗZₗᵀ − diag(Zₗ)², the criterion
//!
//! ```text
//! Σᵢ ‖r̂ᵢr̂ᵢᵀ − diag(r̂ᵢ)² − Σₗ ψₗ Aₗⁱ‖²_F + λ‖ψ‖₁ = ψᵀBψ − 2δᵀψ + c + λ‖ψ‖₁
//! ```
//!
//! is minimized by coordinate descent. β̂, ψ̂ and σ̂² use disjoint thirds of
//! the subjects.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{partition_indices, LmmDataset, PartitionKind, SubjectPartition};
use crate::error::{Error, Result};
use crate::inference::LambdaChoice;
use crate::lasso::{fit_cv, lambda_grid, CvConfig};

/// One subject's contribution to the moment criterion.
#[derive(Debug, Clone)]
pub struct SubjectMoments {
    pub b: DMatrix<f64>,
    pub delta: DVector<f64>,
    pub c: f64,
}

impl SubjectMoments {
    pub fn new(z: &DMatrix<f64>, r: &DVector<f64>) -> Result<Self> {
        if z.nrows() != r.len() {
            return Err(Error::Dimension(format!("Z has {} rows, residual has {}", z.nrows(), r.len())));
        }
        let g = z.tr_mul(z);
        let h = z.component_mul(z);
        let b = g.component_mul(&g) - h.tr_mul(&h);
        let zr = z.tr_mul(r);
        let r2 = r.component_mul(r);
        let delta = zr.component_mul(&zr) - h.tr_mul(&r2);
        let c = r2.sum().powi(2) - r2.norm_squared();
        Ok(Self { b, delta, c })
    }

    pub fn objective(&self, psi: &DVector<f64>) -> f64 {
        psi.dot(&(&self.b * psi)) - 2.0 * self.delta.dot(psi) + self.c
    }
}

#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub b: DMatrix<f64>,
    pub delta: DVector<f64>,
    pub c: f64,
    pub subjects: Vec<SubjectMoments>,
}

impl MomentSystem {
    fn from_subjects(subjects: Vec<SubjectMoments>, q: usize) -> Self {
        let mut b = DMatrix::zeros(q, q);
        let mut delta = DVector::zeros(q);
        let mut c = 0.0;
        for s in &subjects {
            b += &s.b;
            delta += &s.delta;
            c += s.c;
        }
        Self { b, delta, c, subjects }
    }

    pub fn q(&self) -> usize {
        self.delta.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self::from_subjects(idx.iter().map(|&i| self.subjects[i].clone()).collect(), self.q())
    }

    /// Unpenalized criterion ψᵀBψ − 2δᵀψ + c.
    pub fn objective(&self, psi: &DVector<f64>) -> f64 {
        psi.dot(&(&self.b * psi)) - 2.0 * self.delta.dot(psi) + self.c
    }
}

/// Moment system over the subjects of `ds` with residuals `residuals`.
pub fn build_moment_system(ds: &LmmDataset, residuals: &[DVector<f64>]) -> Result<MomentSystem> {
    if ds.n() == 0 {
        return Err(Error::TooFewSubjects { needed: 1, have: 0 });
    }
    if residuals.len() != ds.n() {
        return Err(Error::Dimension(format!("{} residual vectors for {} subjects", residuals.len(), ds.n())));
    }
    let subjects = ds
        .blocks()
        .par_iter()
        .zip(residuals.par_iter())
        .map(|(b, r)| SubjectMoments::new(&b.z, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentSystem::from_subjects(subjects, ds.q()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsiSolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub nonneg: bool,
}

impl Default for PsiSolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 10_000, nonneg: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiFit {
    pub psi: DVector<f64>,
    pub lambda: f64,
    pub iters: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

fn frozen_coords(b: &DMatrix<f64>) -> Vec<bool> {
    let scale = b.diagonal().amax().max(f64::MIN_POSITIVE);
    (0..b.nrows()).map(|k| b[(k, k)] <= 1e-14 * scale).collect()
}

/// KKT violation of the penalized criterion at `psi`.
pub fn psi_kkt_residual(sys: &MomentSystem, psi: &DVector<f64>, lambda: f64, nonneg: bool) -> f64 {
    let grad = (&sys.b * psi - &sys.delta) * 2.0;
    let frozen = frozen_coords(&sys.b);
    let mut worst: f64 = 0.0;
    for k in 0..psi.len() {
        if frozen[k] {
            continue;
        }
        let v = if psi[k] != 0.0 {
            (grad[k] + lambda * psi[k].signum()).abs()
        } else if nonneg {
            (-grad[k] - lambda).max(0.0)
        } else {
            (grad[k].abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Minimizes ψᵀBψ − 2δᵀψ + λ‖ψ‖₁ from `warm` (or zero).
pub fn solve_psi(
    sys: &MomentSystem,
    lambda: f64,
    warm: Option<&DVector<f64>>,
    opts: &PsiSolverOptions,
) -> Result<PsiFit> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda_theta must be >= 0, got {lambda}")));
    }
    let q = sys.q();
    let frozen = frozen_coords(&sys.b);
    for (k, _) in frozen.iter().enumerate().filter(|(_, f)| **f) {
        log::warn!("variance component {k} is unidentifiable (zero diagonal in B); fixed at 0");
    }
    let mut psi = warm.cloned().unwrap_or_else(|| DVector::zeros(q));
    for k in 0..q {
        if frozen[k] || (opts.nonneg && psi[k] < 0.0) {
            psi[k] = 0.0;
        }
    }
    let mut b_psi = &sys.b * &psi;
    let half = lambda / 2.0;
    let mut iters = 0;
    let mut converged = false;
    while iters < opts.max_iters {
        iters += 1;
        let mut max_delta: f64 = 0.0;
        for k in 0..q {
            if frozen[k] {
                continue;
            }
            let bkk = sys.b[(k, k)];
            let rho = sys.delta[k] - b_psi[k] + bkk * psi[k];
            let mut new = if rho > half {
                (rho - half) / bkk
            } else if rho < -half {
                (rho + half) / bkk
            } else {
                0.0
            };
            if opts.nonneg {
                new = new.max(0.0);
            }
            let d = new - psi[k];
            if d != 0.0 {
                psi[k] = new;
                b_psi.axpy(d, &sys.b.column(k), 1.0);
                max_delta = max_delta.max(d.abs());
            }
        }
        if max_delta <= opts.tol * psi.amax().max(1.0) {
            converged = true;
            break;
        }
    }
    let kkt_residual = psi_kkt_residual(sys, &psi, lambda, opts.nonneg);
    Ok(PsiFit { psi, lambda, iters, converged, kkt_residual })
}

/// Smallest λ_θ with ψ̂ = 0.
pub fn psi_lambda_max(sys: &MomentSystem, nonneg: bool) -> f64 {
    if nonneg {
        2.0 * sys.delta.iter().copied().fold(0.0, f64::max)
    } else {
        2.0 * sys.delta.amax()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiCvReport {
    pub lambdas: Vec<f64>,
    pub cv_error: Vec<f64>,
    pub chosen: f64,
}

/// K-fold CV of λ_θ over subjects of the moment system, scoring held-out criterion.
pub fn cross_validate_psi(
    sys: &MomentSystem,
    folds: usize,
    n_lambdas: usize,
    ratio: f64,
    seed: u64,
    opts: &PsiSolverOptions,
) -> Result<PsiCvReport> {
    let n = sys.subjects.len();
    let k = folds.min(n);
    let assignment = partition_indices(n, PartitionKind::CvFolds(k), seed)?;
    let lmax = psi_lambda_max(sys, opts.nonneg);
    if !(lmax > 0.0) {
        return Ok(PsiCvReport { lambdas: vec![0.0], cv_error: vec![0.0], chosen: 0.0 });
    }
    let lambdas = lambda_grid(lmax, n_lambdas, ratio);
    let per_fold: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
            let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
            let tr = sys.subset(&train);
            let mut warm: Option<DVector<f64>> = None;
            let mut errs = Vec::with_capacity(lambdas.len());
            for &lam in &lambdas {
                let fit = solve_psi(&tr, lam, warm.as_ref(), opts)?;
                errs.push(test.iter().map(|&i| sys.subjects[i].objective(&fit.psi)).sum::<f64>());
                warm = Some(fit.psi);
            }
            Ok(errs)
        })
        .collect::<Result<Vec<_>>>()?;
    let cv_error: Vec<f64> =
        (0..lambdas.len()).map(|l| per_fold.iter().map(|f| f[l]).sum::<f64>() / k as f64).collect();
    let best = cv_error.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * best.abs().max(1.0);
    // grid is descending, so the first hit is the largest λ among ties
    let idx = cv_error.iter().position(|&e| e <= best + tol).unwrap_or(0);
    Ok(PsiCvReport { chosen: lambdas[idx], lambdas, cv_error })
}

/// Trace-moment noise variance. Returns `(raw, floored at 0)`.
pub fn estimate_sigma_e2(ds: &LmmDataset, residuals: &[DVector<f64>], psi: &DVector<f64>) -> Result<(f64, f64)> {
    if ds.n() == 0 {
        return Err(Error::TooFewSubjects { needed: 1, have: 0 });
    }
    if residuals.len() != ds.n() || psi.len() != ds.q() {
        return Err(Error::Dimension("residuals or psi do not match the dataset".into()));
    }
    let mut num = 0.0;
    for (b, r) in ds.blocks().iter().zip(residuals) {
        if r.len() != b.rows() {
            return Err(Error::Dimension(format!("subject {}: residual length", b.subject_id)));
        }
        let zz: f64 = (0..ds.q()).map(|l| psi[l] * b.z.column(l).norm_squared()).sum();
        num += r.norm_squared() - zz;
    }
    let raw = num / ds.total_rows() as f64;
    Ok((raw, raw.max(0.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarCompConfig {
    pub cv: CvConfig,
    pub lambda_theta: LambdaChoice,
    pub theta_folds: usize,
    pub theta_n_lambdas: usize,
    pub theta_lambda_ratio: f64,
    pub solver: PsiSolverOptions,
}

impl Default for VarCompConfig {
    fn default() -> Self {
        Self {
            cv: CvConfig::default(),
            lambda_theta: LambdaChoice::Cv,
            theta_folds: 5,
            theta_n_lambdas: 30,
            theta_lambda_ratio: 1e-3,
            solver: PsiSolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarCompEstimate {
    pub psi_hat: DVector<f64>,
    pub sigma_e2_hat: f64,
    pub sigma_e2_floored: f64,
    pub lambda_theta: f64,
    pub split: SubjectPartition,
    pub selected: Vec<usize>,
    pub beta_hat: DVector<f64>,
}

fn residuals(ds: &LmmDataset, beta: &DVector<f64>) -> Vec<DVector<f64>> {
    ds.blocks().iter().map(|b| &b.y - &b.x * beta).collect()
}

/// Three-way split: β̂ on S₁, ψ̂ on S₂, σ̂² on S₃.
pub fn run_varcomp_pipeline(ds: &LmmDataset, seed: u64, cfg: &VarCompConfig) -> Result<VarCompEstimate> {
    if ds.n() < 3 {
        return Err(Error::TooFewSubjects { needed: 3, have: ds.n() });
    }
    let split = ds.partition(PartitionKind::ThreeWaySplit, seed)?;
    let s1 = ds.subset(&split.members(0));
    let s2 = ds.subset(&split.members(1));
    let s3 = ds.subset(&split.members(2));

    let folds = cfg.cv.folds.min(s1.n());
    let cv_cfg = CvConfig { folds, seed: cfg.cv.seed ^ seed, ..cfg.cv.clone() };
    let beta = if folds >= 2 {
        fit_cv(&s1, &cv_cfg)?.fit.beta
    } else {
        return Err(Error::TooFewSubjects { needed: 6, have: ds.n() });
    };

    let sys = build_moment_system(&s2, &residuals(&s2, &beta))?;
    let lambda_theta = match cfg.lambda_theta {
        LambdaChoice::Fixed(l) => l,
        LambdaChoice::Cv => {
            cross_validate_psi(&sys, cfg.theta_folds, cfg.theta_n_lambdas, cfg.theta_lambda_ratio, seed, &cfg.solver)?
                .chosen
        }
    };
    let fit = solve_psi(&sys, lambda_theta, None, &cfg.solver)?;
    if !fit.converged {
        return Err(Error::NoConvergence(format!("psi solver at λ_θ = {lambda_theta:.3e}")));
    }
    let (sigma_e2_hat, sigma_e2_floored) = estimate_sigma_e2(&s3, &residuals(&s3, &beta), &fit.psi)?;
    let selected = (0..fit.psi.len()).filter(|&k| fit.psi[k] != 0.0).collect();
    Ok(VarCompEstimate {
        psi_hat: fit.psi,
        sigma_e2_hat,
        sigma_e2_floored,
        lambda_theta,
        split,
        selected,
        beta_hat: beta,
    })
}

/// Writes `index,psi_hat`; σ̂² goes to the JSON summary.
pub fn write_varcomp_csv(path: &Path, est: &VarCompEstimate) -> Result<()> {
    let io = |e| Error::Io { path: path.to_path_buf(), source: e };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "index,psi_hat").map_err(io)?;
    for (k, v) in est.psi_hat.iter().enumerate() {
        writeln!(f, "{k},{v}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn varcomp_summary_json(est: &VarCompEstimate) -> serde_json::Value {
    serde_json::json!({
        "psi_hat": est.psi_hat.as_slice(),
        "sigma_e2_hat": est.sigma_e2_hat,
        "sigma_e2_floored": est.sigma_e2_floored,
        "lambda_theta": est.lambda_theta,
        "selected": est.selected,
        "split_sizes": est.split.sizes(),
    })
}
