//! Data generators for the simulation studies.

use nalgebra::{Cholesky, DMatrix, DVector, Schur, SymmetricEigen};
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::LmmDataset;
use crate::error::{Error, Result};
use crate::rng::{KeyedRng, Stream};

pub const MAX_PD_ATTEMPTS: usize = 1000;
const PD_TOL: f64 = 1e-8;

fn std_normal(r: &mut KeyedRng) -> f64 {
    StandardNormal.sample(r)
}

fn is_pd(m: &DMatrix<f64>) -> bool {
    SymmetricEigen::new(m.clone()).eigenvalues.min() > PD_TOL
}

/// Population covariance Σ_X and the recipe for per-subject perturbations.
#[derive(Debug, Clone)]
pub struct SigmaXGenerator {
    pub base: DMatrix<f64>,
    /// Draws needed before the base matrix came out positive definite.
    pub base_attempts: usize,
    pub mask_prob: f64,
    pub perturb_sd: f64,
}

/// Sparse unit-diagonal Σ_X: off-diagonals are 0 w.p. 0.8, else Unif(−0.5, 0.5).
/// Redrawn until positive definite.
pub fn gen_sigma_x(p: usize, key: &[u64]) -> Result<SigmaXGenerator> {
    if p < 2 {
        return Err(Error::InvalidInput("Σ_X needs p >= 2".into()));
    }
    for attempt in 0..MAX_PD_ATTEMPTS {
        let mut parts = key.to_vec();
        parts.extend([Stream::Structure as u64, attempt as u64]);
        let mut r = KeyedRng::from_parts(&parts);
        let mut s = DMatrix::identity(p, p);
        for j in 0..p {
            for k in j + 1..p {
                let keep = r.uniform() >= 0.8;
                let v = r.uniform() - 0.5;
                if keep {
                    s[(j, k)] = v;
                    s[(k, j)] = v;
                }
            }
        }
        if is_pd(&s) {
            if attempt > 0 {
                log::debug!("Σ_X positive definite after {} draws", attempt + 1);
            }
            return Ok(SigmaXGenerator { base: s, base_attempts: attempt + 1, mask_prob: 0.2, perturb_sd: 0.1 });
        }
    }
    Err(Error::Simulation(format!("Σ_X not positive definite after {MAX_PD_ATTEMPTS} draws (p = {p})")))
}

impl SigmaXGenerator {
    /// Identity population covariance with no perturbation.
    pub fn identity(p: usize) -> Self {
        Self { base: DMatrix::identity(p, p), base_attempts: 1, mask_prob: 0.0, perturb_sd: 0.0 }
    }

    /// Subject-level Σ_Xⁱ: each upper-triangle entry is selected w.p. `mask_prob`,
    /// then shifted by N(0, perturb_sd²). Redrawn until positive definite.
    pub fn perturb(&self, rng: &mut KeyedRng) -> Result<(DMatrix<f64>, usize)> {
        let p = self.base.nrows();
        if self.mask_prob == 0.0 || self.perturb_sd == 0.0 {
            return Ok((self.base.clone(), 1));
        }
        for attempt in 0..MAX_PD_ATTEMPTS {
            let mut s = self.base.clone();
            for j in 0..p {
                for k in j + 1..p {
                    if rng.uniform() < self.mask_prob {
                        let v = self.perturb_sd * std_normal(rng);
                        s[(j, k)] += v;
                        s[(k, j)] += v;
                    }
                }
            }
            if is_pd(&s) {
                return Ok((s, attempt + 1));
            }
        }
        Err(Error::Simulation(format!("perturbed Σ_X not positive definite after {MAX_PD_ATTEMPTS} draws")))
    }
}

/// `m` rows drawn from N(0, Σ): a standard-normal m×p draw times chol(Σ)ᵀ.
pub fn matrix_normal(m: usize, sigma: &DMatrix<f64>, rng: &mut KeyedRng) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    let l = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::Simulation("covariance is not positive definite".into()))?
        .l();
    let g = DMatrix::from_fn(m, p, |_, _| std_normal(rng));
    Ok(g * l.transpose())
}

/// Ground truth attached to a generated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub beta: DVector<f64>,
    pub psi: DVector<f64>,
    pub sigma_e2: f64,
}

/// Linear mixed model yⁱ = Xⁱ(β + γᵢ) + εᵢ with Z = X.
#[derive(Debug, Clone)]
pub struct LmmSpec {
    pub n: usize,
    pub m: usize,
    pub beta: DVector<f64>,
    pub psi: DVector<f64>,
    pub sigma_e2: f64,
    pub sigma_x: SigmaXKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaXKind {
    /// Sparse random population covariance with subject-level perturbations.
    Perturbed,
    /// i.i.d. standard-normal covariates.
    Identity,
}

/// Draws one replicate of the mixed model.
pub fn gen_lmm_dataset(spec: &LmmSpec, seed: u64, rep: u64) -> Result<(LmmDataset, Truth)> {
    let p = spec.beta.len();
    if spec.psi.len() != p {
        return Err(Error::Dimension(format!("psi has {} entries, beta has {p}", spec.psi.len())));
    }
    if spec.psi.iter().any(|&v| v < 0.0) || spec.sigma_e2 < 0.0 {
        return Err(Error::InvalidInput("variances must be nonnegative".into()));
    }
    let gen = match spec.sigma_x {
        SigmaXKind::Perturbed => gen_sigma_x(p, &[seed, rep])?,
        SigmaXKind::Identity => SigmaXGenerator::identity(p),
    };
    let sd_psi = spec.psi.map(f64::sqrt);
    let sd_e = spec.sigma_e2.sqrt();
    let mut subjects = Vec::with_capacity(spec.n);
    for i in 0..spec.n as u64 {
        let (sigma_i, _) = gen.perturb(&mut KeyedRng::for_subject(seed, rep, i, Stream::Perturbation))?;
        let x = matrix_normal(spec.m, &sigma_i, &mut KeyedRng::for_subject(seed, rep, i, Stream::Design))?;
        let mut rg = KeyedRng::for_subject(seed, rep, i, Stream::RandomEffect);
        let gamma = DVector::from_fn(p, |k, _| sd_psi[k] * std_normal(&mut rg));
        let mut re = KeyedRng::for_subject(seed, rep, i, Stream::Noise);
        let eps = DVector::from_fn(spec.m, |_, _| sd_e * std_normal(&mut re));
        let y = &x * (&spec.beta + gamma) + eps;
        subjects.push((format!("s{i:04}"), y, x));
    }
    let ds = LmmDataset::with_shared_design(subjects)?;
    Ok((ds, Truth { beta: spec.beta.clone(), psi: spec.psi.clone(), sigma_e2: spec.sigma_e2 }))
}

/// β* of the main simulation: (β₁, β₂, β₆, β₇, β₉) = (1, 0.5, 0.2, 0.1, 0.05).
pub fn section5_beta(p: usize) -> DVector<f64> {
    let mut b = DVector::zeros(p);
    for (k, v) in [(0, 1.0), (1, 0.5), (5, 0.2), (6, 0.1), (8, 0.05)] {
        if k < p {
            b[k] = v;
        }
    }
    b
}

/// ψ* of the main simulation.
pub fn section5_psi(p: usize) -> DVector<f64> {
    let mut s = DVector::zeros(p);
    for (k, v) in [(0, 2.0), (3, 2.0), (6, 0.1), (8, 0.1), (9, 4.0), (11, 0.1), (15, 2.0), (19, 0.1)] {
        if k < p {
            s[k] = v;
        }
    }
    s
}

/// Fixed effects of the toy neighborhood example (node 1 on nodes 2..7).
pub const TOY_BETA: [f64; 6] = [0.5, -0.4, 0.2, 0.4, 0.0, 0.0];
/// Random-effect standard deviations of the toy example.
pub const TOY_SD: [f64; 6] = [1.5, 0.0, 0.5, 0.75, 0.0, 0.5];

pub fn toy_spec(n: usize, m: usize) -> LmmSpec {
    LmmSpec {
        n,
        m,
        beta: DVector::from_column_slice(&TOY_BETA),
        psi: DVector::from_iterator(6, TOY_SD.iter().map(|s| s * s)),
        sigma_e2: 1.0,
        sigma_x: SigmaXKind::Identity,
    }
}

/// Population structure of the mixed-effect VAR(1).
#[derive(Debug, Clone, PartialEq)]
pub struct MevarStructure {
    pub phi: DMatrix<f64>,
    /// Entrywise variances of Γⁱ.
    pub sigma_gamma2: DMatrix<f64>,
    pub sigma_eps2: f64,
    pub margin: f64,
}

/// Spectral radius of a square matrix. Falls back to the Gelfand bound
/// ‖A^N‖^{1/N} (N = 2¹⁰, never below ρ) when the Schur iteration stalls.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if let Some(s) = Schur::try_new(m.clone(), f64::EPSILON, 2000) {
        return s.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    log::debug!("Schur iteration stalled; using the Gelfand bound");
    let mut a = m.clone();
    let mut log_scale = 0.0;
    for k in 1..=10 {
        let nrm = a.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        a /= nrm;
        log_scale += nrm.ln() / f64::powi(2.0, k - 1);
        a = &a * &a;
    }
    (log_scale + a.norm().ln() / 1024.0).exp()
}

/// Φ with diagonal Unif(0.2, 0.8) and off-diagonals 0 w.p. 0.8 else N(0, 0.04);
/// σ_Γ² entries nonzero w.p. 0.1 with Unif(0.05, 0.15) values. Φ is redrawn
/// until ρ(Φ) ≤ 1 − 2Δ so that subject matrices have room below 1 − Δ.
pub fn gen_mevar_structure(p: usize, seed: u64, margin: f64) -> Result<MevarStructure> {
    if p < 1 {
        return Err(Error::InvalidInput("p must be positive".into()));
    }
    if !(margin > 0.0 && margin < 0.5) {
        return Err(Error::InvalidInput(format!("stationarity margin {margin} outside (0, 0.5)")));
    }
    let off = Normal::new(0.0, 0.2).expect("valid sd");
    for attempt in 0..MAX_PD_ATTEMPTS as u64 {
        let mut r = KeyedRng::from_parts(&[seed, Stream::Structure as u64, attempt]);
        let mut phi = DMatrix::zeros(p, p);
        for j in 0..p {
            for k in 0..p {
                if j == k {
                    phi[(j, k)] = 0.2 + 0.6 * r.uniform();
                } else {
                    let keep = r.uniform() >= 0.8;
                    let v = off.sample(&mut r);
                    if keep {
                        phi[(j, k)] = v;
                    }
                }
            }
        }
        if spectral_radius(&phi) > 1.0 - 2.0 * margin {
            continue;
        }
        let mut r = KeyedRng::from_parts(&[seed, Stream::Structure as u64, attempt, 1]);
        let sigma_gamma2 = DMatrix::from_fn(p, p, |_, _| {
            let keep = r.uniform() < 0.1;
            let v = 0.05 + 0.1 * r.uniform();
            if keep {
                v
            } else {
                0.0
            }
        });
        return Ok(MevarStructure { phi, sigma_gamma2, sigma_eps2: 0.5, margin });
    }
    Err(Error::Simulation(format!("no stable Φ after {MAX_PD_ATTEMPTS} draws")))
}

/// Draws Γⁱ with ρ(Φ + Γⁱ) ≤ 1 − Δ: rejection first, then radial shrinkage.
/// Returns the deviation and the number of shrink steps applied.
pub fn draw_gamma(s: &MevarStructure, rng: &mut KeyedRng, max_tries: usize) -> (DMatrix<f64>, usize) {
    let p = s.phi.nrows();
    let sd = s.sigma_gamma2.map(f64::sqrt);
    let bound = 1.0 - s.margin;
    let mut last = DMatrix::zeros(p, p);
    for _ in 0..max_tries.max(1) {
        let g = DMatrix::from_fn(p, p, |j, k| sd[(j, k)] * std_normal(rng));
        if spectral_radius(&(&s.phi + &g)) <= bound {
            return (g, 0);
        }
        last = g;
    }
    let mut shrinks = 0;
    while spectral_radius(&(&s.phi + &last)) > bound {
        last *= 0.9;
        shrinks += 1;
    }
    (last, shrinks)
}

/// Rejection attempts for Γⁱ before falling back to shrinkage.
pub const GAMMA_TRIES: usize = 200;
pub const BURN_IN: usize = 200;

/// One subject's T×p series after burn-in, started at zero.
pub fn simulate_series(s: &MevarStructure, gamma: &DMatrix<f64>, t: usize, rng: &mut KeyedRng) -> DMatrix<f64> {
    let p = s.phi.nrows();
    let a = &s.phi + gamma;
    let sd = s.sigma_eps2.sqrt();
    let mut cur = DVector::zeros(p);
    let mut out = DMatrix::zeros(t, p);
    for step in 0..BURN_IN + t {
        let e = DVector::from_fn(p, |_, _| sd * std_normal(rng));
        cur = &a * cur + e;
        if step >= BURN_IN {
            out.row_mut(step - BURN_IN).copy_from(&cur.transpose());
        }
    }
    out
}

/// Series for all subjects of one replicate, plus total shrink steps.
pub fn gen_mevar_series(s: &MevarStructure, n: usize, t: usize, seed: u64, rep: u64) -> (Vec<DMatrix<f64>>, usize) {
    let mut shrinks = 0;
    let series = (0..n as u64)
        .map(|i| {
            let (g, k) = draw_gamma(s, &mut KeyedRng::for_subject(seed, rep, i, Stream::RandomEffect), GAMMA_TRIES);
            shrinks += k;
            simulate_series(s, &g, t, &mut KeyedRng::for_subject(seed, rep, i, Stream::Series))
        })
        .collect();
    (series, shrinks)
}
