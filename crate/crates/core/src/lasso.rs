//! Decorrelated ℓ₁ regression.
//!
//! Minimizes
//!
//! ```text
//! 1/(2T) · Σᵢ ‖Σᵢ^{-1/2}(yᵢ − Xᵢβ)‖² + λ‖β‖₁,    T = Σᵢ tr(Σᵢ⁻¹)
//! ```
//!
//! by cyclic coordinate descent on the Gram form of the problem. Per-subject
//! sufficient statistics are kept so that cross-validation folds can be
//! assembled by summation instead of re-decorrelating the data.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{partition_subjects, LmmDataset, PartitionKind, SubjectPartition};
use crate::error::{Error, Result};
use crate::proxy::{decorrelate, factor_proxy, DecorrelatedBlock, ProxyFactor};

/// Which proxy covariance decorrelates the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyKind {
    /// `Σₐ = aZZᵀ + I`; response y, design X.
    SigmaA,
    /// `Σ_b = aZ₋ⱼZ₋ⱼᵀ + I` for the projection of X column `coord` on the
    /// remaining columns. The Z column holding `coord` (if any) is dropped.
    SigmaB { coord: usize },
}

#[derive(Debug, Clone)]
struct SubjectStats {
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    tr_inv: f64,
    rows: usize,
    raw: Option<(DMatrix<f64>, DVector<f64>, f64)>,
}

impl SubjectStats {
    fn from_block(block: &DecorrelatedBlock) -> Self {
        Self {
            gram: block.x_tilde.tr_mul(&block.x_tilde),
            xty: block.x_tilde.tr_mul(&block.y_tilde),
            yty: block.y_tilde.norm_squared(),
            tr_inv: block.tr_inv,
            rows: block.y_tilde.len(),
            raw: None,
        }
    }

    fn rss(&self, beta: &DVector<f64>) -> f64 {
        quad_rss(self.yty, &self.xty, &self.gram, beta)
    }

    fn raw_rss(&self, beta: &DVector<f64>) -> Option<f64> {
        self.raw.as_ref().map(|(g, c, yy)| quad_rss(*yy, c, g, beta))
    }
}

fn quad_rss(yty: f64, xty: &DVector<f64>, gram: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
    (yty - 2.0 * beta.dot(xty) + beta.dot(&(gram * beta))).max(0.0)
}

/// Stacked decorrelated regression with its normalizer `T`.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    blocks: Vec<DecorrelatedBlock>,
    factors: Vec<ProxyFactor>,
    stats: Vec<SubjectStats>,
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    t: f64,
    p: usize,
    a: f64,
}

impl LassoProblem {
    fn assemble(
        blocks: Vec<DecorrelatedBlock>,
        factors: Vec<ProxyFactor>,
        stats: Vec<SubjectStats>,
        p: usize,
        a: f64,
    ) -> Result<Self> {
        let mut gram = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        let mut yty = 0.0;
        let mut t = 0.0;
        for s in &stats {
            gram += &s.gram;
            xty += &s.xty;
            yty += s.yty;
            t += s.tr_inv;
        }
        if !(t > 0.0) {
            return Err(Error::InvalidInput("empty regression: trace normalizer is zero".into()));
        }
        Ok(Self { blocks, factors, stats, gram, xty, yty, t, p, a })
    }

    /// Builds a problem directly from decorrelated blocks.
    pub fn from_blocks(blocks: Vec<DecorrelatedBlock>, a: f64) -> Result<Self> {
        let p = blocks.first().map(|b| b.x_tilde.ncols()).ok_or(Error::TooFewSubjects { needed: 1, have: 0 })?;
        if blocks.iter().any(|b| b.x_tilde.ncols() != p || b.x_tilde.nrows() != b.y_tilde.len()) {
            return Err(Error::Dimension("blocks disagree on shape".into()));
        }
        let stats = blocks.iter().map(SubjectStats::from_block).collect();
        let factors = blocks.iter().map(|b| ProxyFactor::identity(b.y_tilde.len())).collect();
        Self::assemble(blocks, factors, stats, p, a)
    }

    /// Problem restricted to a subset of subjects (sums of cached statistics).
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let blocks = idx.iter().map(|&i| self.blocks[i].clone()).collect();
        let factors = idx.iter().map(|&i| self.factors[i].clone()).collect();
        let stats = idx.iter().map(|&i| self.stats[i].clone()).collect();
        Self::assemble(blocks, factors, stats, self.p, self.a)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    /// Σᵢ tr(Σᵢ⁻¹).
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn blocks(&self) -> &[DecorrelatedBlock] {
        &self.blocks
    }

    pub fn factors(&self) -> &[ProxyFactor] {
        &self.factors
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn xty(&self) -> &DVector<f64> {
        &self.xty
    }

    pub fn total_rows(&self) -> usize {
        self.stats.iter().map(|s| s.rows).sum()
    }

    /// Objective value at `beta`.
    pub fn objective(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        quad_rss(self.yty, &self.xty, &self.gram, beta) / (2.0 * self.t) + lambda * beta.lp_norm(1)
    }

    /// Gradient of the smooth part, `−X̃ᵀ(ỹ − X̃β)/T`.
    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        (&self.gram * beta - &self.xty) / self.t
    }

    /// Largest KKT violation at `beta` for penalty `lambda`.
    pub fn kkt_residual(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let g = self.gradient(beta);
        let mut worst: f64 = 0.0;
        for j in 0..self.p {
            if self.gram[(j, j)] <= 0.0 {
                continue;
            }
            let v =
                if beta[j] != 0.0 { (g[j] + lambda * beta[j].signum()).abs() } else { (g[j].abs() - lambda).max(0.0) };
            worst = worst.max(v);
        }
        worst
    }

    /// Decorrelated residual sum of squares of subject `i`.
    pub fn subject_rss(&self, i: usize, beta: &DVector<f64>) -> f64 {
        self.stats[i].rss(beta)
    }

    pub fn subject_tr_inv(&self, i: usize) -> f64 {
        self.stats[i].tr_inv
    }
}

fn regression_columns(ds: &LmmDataset, kind: ProxyKind) -> Result<(Option<usize>, Vec<usize>, Option<usize>)> {
    match kind {
        ProxyKind::SigmaA => Ok((None, (0..ds.p()).collect(), None)),
        ProxyKind::SigmaB { coord } => {
            if coord >= ds.p() {
                return Err(Error::Dimension(format!("coordinate {coord} out of range for p = {}", ds.p())));
            }
            if ds.p() < 2 {
                return Err(Error::InvalidInput("projection needs p >= 2".into()));
            }
            let rest = (0..ds.p()).filter(|&k| k != coord).collect();
            Ok((Some(coord), rest, ds.z_column_of(coord)))
        }
    }
}

/// Decorrelates every subject of `ds` for the given proxy.
pub fn build_problem(ds: &LmmDataset, a: f64, kind: ProxyKind) -> Result<LassoProblem> {
    build_problem_with(ds, a, kind, false)
}

/// As [`build_problem`]; `with_raw` also caches undecorrelated statistics for
/// raw-metric cross-validation.
pub fn build_problem_with(ds: &LmmDataset, a: f64, kind: ProxyKind, with_raw: bool) -> Result<LassoProblem> {
    if ds.n() == 0 {
        return Err(Error::TooFewSubjects { needed: 1, have: 0 });
    }
    let (response, design, dropped) = regression_columns(ds, kind)?;
    let p = design.len();
    let per_subject: Vec<(DecorrelatedBlock, ProxyFactor, SubjectStats)> = ds
        .blocks()
        .par_iter()
        .map(|b| {
            let f = factor_proxy(&b.z, a, dropped)?;
            let y = match response {
                Some(c) => b.x.column(c).into_owned(),
                None => b.y.clone(),
            };
            let x = if response.is_some() { b.x.select_columns(design.iter()) } else { b.x.clone() };
            let block = decorrelate(&f, &y, &x)?;
            let mut stats = SubjectStats::from_block(&block);
            if with_raw {
                stats.raw = Some((x.tr_mul(&x), x.tr_mul(&y), y.norm_squared()));
            }
            Ok((block, f, stats))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut blocks = Vec::with_capacity(per_subject.len());
    let mut factors = Vec::with_capacity(per_subject.len());
    let mut stats = Vec::with_capacity(per_subject.len());
    for (b, f, s) in per_subject {
        blocks.push(b);
        factors.push(f);
        stats.push(s);
    }
    LassoProblem::assemble(blocks, factors, stats, p, a)
}

/// Smallest λ at which the solution is identically zero: `‖X̃ᵀỹ‖∞ / T`.
pub fn lambda_max(problem: &LassoProblem) -> Result<f64> {
    if problem.gram.diagonal().iter().all(|&d| d <= 0.0) {
        return Err(Error::InvalidInput("all-zero design".into()));
    }
    Ok(problem.xty.amax() / problem.t)
}

/// `n` log-spaced values from `lmax` down to `lmax·ratio`.
pub fn lambda_grid(lmax: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lmax];
    }
    let lo = ratio.ln();
    (0..n).map(|k| lmax * (lo * k as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub kkt_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iters: 10_000, kkt_tol: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta: DVector<f64>,
    pub lambda: f64,
    pub a: f64,
    pub objective: f64,
    pub active_set: Vec<usize>,
    pub iters: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Coordinate-descent state shared by sweeps.
struct Cd<'a> {
    pb: &'a LassoProblem,
    beta: DVector<f64>,
    g_beta: DVector<f64>,
    thresh: f64,
    frozen: Vec<bool>,
}

impl Cd<'_> {
    /// One pass over `coords`; returns the largest absolute coefficient change.
    fn sweep(&mut self, coords: impl Iterator<Item = usize>) -> f64 {
        let mut max_delta: f64 = 0.0;
        for j in coords {
            if self.frozen[j] {
                continue;
            }
            let gjj = self.pb.gram[(j, j)];
            let old = self.beta[j];
            let rho = self.pb.xty[j] - self.g_beta[j] + gjj * old;
            let new = soft_threshold(rho, self.thresh) / gjj;
            let delta = new - old;
            if delta != 0.0 {
                self.beta[j] = new;
                self.g_beta.axpy(delta, &self.pb.gram.column(j), 1.0);
                max_delta = max_delta.max(delta.abs());
            }
        }
        max_delta
    }
}

/// Solves the decorrelated LASSO at one penalty by cyclic coordinate descent.
pub fn solve_lasso(
    problem: &LassoProblem,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<LassoFit> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    let p = problem.p;
    let scale = problem.gram.diagonal().amax().max(f64::MIN_POSITIVE);
    let frozen: Vec<bool> = (0..p).map(|j| problem.gram[(j, j)] <= 1e-14 * scale).collect();
    let mut beta = match warm_start {
        Some(b) if b.len() == p => b.clone(),
        Some(b) => return Err(Error::Dimension(format!("warm start has length {}, expected {p}", b.len()))),
        None => DVector::zeros(p),
    };
    for j in 0..p {
        if frozen[j] {
            beta[j] = 0.0;
        }
    }
    let g_beta = &problem.gram * &beta;
    let mut cd = Cd { pb: problem, beta, g_beta, thresh: lambda * problem.t, frozen };

    let mut iters = 0;
    let mut converged = false;
    #[cfg(debug_assertions)]
    let mut last_obj = problem.objective(&cd.beta, lambda);
    while iters < opts.max_iters {
        iters += 1;
        let delta = cd.sweep(0..p);
        #[cfg(debug_assertions)]
        {
            let obj = problem.objective(&cd.beta, lambda);
            debug_assert!(obj <= last_obj + 1e-9 * last_obj.abs().max(1.0), "objective increased");
            last_obj = obj;
        }
        let tol = opts.tol * cd.beta.amax().max(1.0);
        if delta < tol {
            converged = true;
            break;
        }
        // iterate on the active set until it settles, then re-check with a full sweep
        let active: Vec<usize> = (0..p).filter(|&j| cd.beta[j] != 0.0).collect();
        while iters < opts.max_iters {
            iters += 1;
            let d = cd.sweep(active.iter().copied());
            if d < opts.tol * cd.beta.amax().max(1.0) {
                break;
            }
        }
    }
    let beta = cd.beta;
    let kkt_residual = problem.kkt_residual(&beta, lambda);
    let active_set = (0..p).filter(|&j| beta[j] != 0.0).collect();
    Ok(LassoFit {
        objective: problem.objective(&beta, lambda),
        beta,
        lambda,
        a: problem.a,
        active_set,
        iters,
        converged,
        kkt_residual,
    })
}

/// Warm-started path over strictly descending penalties.
pub fn solve_path(problem: &LassoProblem, lambdas: &[f64], opts: &SolverOptions) -> Result<Vec<LassoFit>> {
    if lambdas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidInput("lambdas must be strictly descending".into()));
    }
    let mut fits: Vec<LassoFit> = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let warm = fits.last().map(|f| f.beta.clone());
        fits.push(solve_lasso(problem, lam, warm.as_ref(), opts)?);
    }
    Ok(fits)
}

/// Held-out error used to score cross-validation folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMetric {
    /// Σ decorrelated RSS / Σ tr(Σ⁻¹) over held-out subjects, at the candidate a.
    #[default]
    Decorrelated,
    /// Σ ‖y − Xβ‖² / Σ mᵢ over held-out subjects.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub a_grid: Vec<f64>,
    pub n_lambdas: usize,
    pub lambda_ratio: f64,
    pub folds: usize,
    pub seed: u64,
    pub metric: CvMetric,
    pub solver: SolverOptions,
}

/// Decorrelation constants exercised in the reference simulations.
pub const DEFAULT_A_GRID: [f64; 4] = [0.01, 1.0, 10.0, 50.0];

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            a_grid: DEFAULT_A_GRID.to_vec(),
            n_lambdas: 50,
            lambda_ratio: 1e-3,
            folds: 5,
            seed: 0,
            metric: CvMetric::Decorrelated,
            solver: SolverOptions::default(),
        }
    }
}

impl CvConfig {
    pub fn with_a(mut self, a: f64) -> Self {
        self.a_grid = vec![a];
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// `(a, λ)` candidates.
    pub grid: Vec<(f64, f64)>,
    pub cv_mse: Vec<f64>,
    pub chosen: (f64, f64),
    /// Held-out error per grid point and fold.
    pub per_fold: Vec<Vec<f64>>,
}

impl CvReport {
    pub fn chosen_index(&self) -> usize {
        self.grid.iter().position(|g| *g == self.chosen).unwrap_or(0)
    }
}

/// Index of the minimum; ties go to larger λ, then smaller a.
fn pick_minimum(grid: &[(f64, f64)], mse: &[f64]) -> usize {
    let best = mse.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * best.abs().max(1.0);
    let mut chosen: Option<usize> = None;
    for (i, &v) in mse.iter().enumerate() {
        if !(v <= best + tol) {
            continue;
        }
        chosen = match chosen {
            None => Some(i),
            Some(c) => {
                let (ca, cl) = grid[c];
                let (a, l) = grid[i];
                if l > cl || (l == cl && a < ca) {
                    Some(i)
                } else {
                    Some(c)
                }
            }
        };
    }
    chosen.unwrap_or(0)
}

/// Cross-validates λ (and a) over prebuilt per-a problems sharing one subject partition.
pub fn cross_validate_problems(
    problems: &[LassoProblem],
    partition: &SubjectPartition,
    cfg: &CvConfig,
) -> Result<CvReport> {
    if problems.is_empty() {
        return Err(Error::InvalidInput("empty a grid".into()));
    }
    let k = partition.parts();
    let mut grid = Vec::new();
    let mut per_fold = Vec::new();
    for pb in problems {
        let lmax = lambda_max(pb)?;
        let lambdas = lambda_grid(lmax, cfg.n_lambdas, cfg.lambda_ratio);
        let fold_errors: Vec<Vec<f64>> = (0..k)
            .into_par_iter()
            .map(|fold| {
                let train = pb.subset(&partition.complement(fold))?;
                let test = partition.members(fold);
                let fits = solve_path(&train, &lambdas, &cfg.solver)?;
                fits.iter()
                    .map(|fit| {
                        let (mut num, mut den) = (0.0, 0.0);
                        for &i in &test {
                            let s = &pb.stats[i];
                            match cfg.metric {
                                CvMetric::Decorrelated => {
                                    num += s.rss(&fit.beta);
                                    den += s.tr_inv;
                                }
                                CvMetric::Raw => {
                                    num += s.raw_rss(&fit.beta).ok_or_else(|| {
                                        Error::InvalidInput("raw CV metric needs raw statistics".into())
                                    })?;
                                    den += s.rows as f64;
                                }
                            }
                        }
                        Ok(num / den)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (l, &lam) in lambdas.iter().enumerate() {
            grid.push((pb.a, lam));
            per_fold.push(fold_errors.iter().map(|f| f[l]).collect::<Vec<f64>>());
        }
    }
    let cv_mse: Vec<f64> = per_fold.iter().map(|f| f.iter().sum::<f64>() / f.len() as f64).collect();
    let chosen = grid[pick_minimum(&grid, &cv_mse)];
    Ok(CvReport { grid, cv_mse, chosen, per_fold })
}

/// Subject-level K-fold cross-validation over `(a, λ)`.
pub fn cross_validate(ds: &LmmDataset, cfg: &CvConfig) -> Result<CvReport> {
    if cfg.a_grid.is_empty() {
        return Err(Error::InvalidInput("empty a grid".into()));
    }
    let partition = partition_subjects(ds, PartitionKind::CvFolds(cfg.folds), cfg.seed)?;
    let with_raw = cfg.metric == CvMetric::Raw;
    let problems = cfg
        .a_grid
        .iter()
        .map(|&a| build_problem_with(ds, a, ProxyKind::SigmaA, with_raw))
        .collect::<Result<Vec<_>>>()?;
    cross_validate_problems(&problems, &partition, cfg)
}

/// Refits on the full problem at the chosen λ by following the same grid.
pub fn refit_at(problem: &LassoProblem, report: &CvReport, cfg: &CvConfig) -> Result<LassoFit> {
    let (a, lam) = report.chosen;
    let path: Vec<f64> = report.grid.iter().filter(|g| g.0 == a && g.1 >= lam).map(|g| g.1).collect();
    let fits = solve_path(problem, &path, &cfg.solver)?;
    fits.into_iter().last().ok_or_else(|| Error::InvalidInput("empty λ path".into()))
}

/// Result of cross-validated fitting: the chosen fit and its problem.
#[derive(Debug, Clone)]
pub struct CvFit {
    pub fit: LassoFit,
    pub report: CvReport,
    pub problem: LassoProblem,
}

/// Cross-validates `(a, λ)` and refits on all subjects.
pub fn fit_cv(ds: &LmmDataset, cfg: &CvConfig) -> Result<CvFit> {
    let partition = partition_subjects(ds, PartitionKind::CvFolds(cfg.folds), cfg.seed)?;
    fit_cv_with_partition(ds, &partition, cfg)
}

pub fn fit_cv_with_partition(ds: &LmmDataset, partition: &SubjectPartition, cfg: &CvConfig) -> Result<CvFit> {
    if cfg.a_grid.is_empty() {
        return Err(Error::InvalidInput("empty a grid".into()));
    }
    let with_raw = cfg.metric == CvMetric::Raw;
    let problems = cfg
        .a_grid
        .iter()
        .map(|&a| build_problem_with(ds, a, ProxyKind::SigmaA, with_raw))
        .collect::<Result<Vec<_>>>()?;
    let report = cross_validate_problems(&problems, partition, cfg)?;
    let idx = cfg.a_grid.iter().position(|&a| a == report.chosen.0).unwrap_or(0);
    let problem = problems.into_iter().nth(idx).expect("index within grid");
    let fit = refit_at(&problem, &report, cfg)?;
    Ok(CvFit { fit, report, problem })
}
