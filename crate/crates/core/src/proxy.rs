//! Proxy covariance `a·ZZᵀ + I` in spectral form.
//!
//! All operators are applied through the eigenpairs of the Gram matrix `ZZᵀ`,
//! so no dense m×m inverse or square root is ever formed:
//!
//! ```text
//! (aZZᵀ + I)⁻¹    = I − U diag(aλ/(aλ+1)) Uᵀ
//! (aZZᵀ + I)^-1/2 = I − U diag(1 − 1/√(aλ+1)) Uᵀ
//! tr((aZZᵀ + I)⁻¹) = (m − r) + Σ 1/(aλ+1)
//! ```

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Relative cutoff below which Gram eigenvalues are treated as exact zeros.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ProxyFactor {
    a: f64,
    eigvals: Vec<f64>,
    eigvecs: DMatrix<f64>,
    m: usize,
    dropped_col: Option<usize>,
}

impl ProxyFactor {
    /// Identity proxy on `m` rows (the `a = 0` or `Z = 0` case).
    pub fn identity(m: usize) -> Self {
        Self { a: 0.0, eigvals: Vec::new(), eigvecs: DMatrix::zeros(m, 0), m, dropped_col: None }
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    /// Eigenvalues of `ZZᵀ` (squared singular values of Z), descending.
    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    pub fn dropped_col(&self) -> Option<usize> {
        self.dropped_col
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.m {
            return Err(Error::Dimension(format!("operand has {rows} rows, proxy has {}", self.m)));
        }
        Ok(())
    }

    fn apply_spectral(&self, v: &DMatrix<f64>, weight: impl Fn(f64) -> f64) -> DMatrix<f64> {
        if self.eigvals.is_empty() {
            return v.clone();
        }
        let mut proj = self.eigvecs.tr_mul(v);
        for (l, mut row) in proj.row_iter_mut().enumerate() {
            row *= weight(self.a * self.eigvals[l]);
        }
        let mut out = v.clone();
        out.gemm(-1.0, &self.eigvecs, &proj, 1.0);
        out
    }

    /// Solves `(aZZᵀ + I) u = v`.
    pub fn apply_inv(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(v.len())?;
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        Ok(self.apply_spectral(&m, |al| al / (al + 1.0)).column(0).into_owned())
    }

    /// Applies `(aZZᵀ + I)^{-1/2}` to every column of `m`.
    pub fn apply_inv_sqrt(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(m.nrows())?;
        Ok(self.apply_spectral(m, |al| 1.0 - 1.0 / (al + 1.0).sqrt()))
    }

    pub fn apply_inv_sqrt_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(v.len())?;
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        Ok(self.apply_spectral(&m, |al| 1.0 - 1.0 / (al + 1.0).sqrt()).column(0).into_owned())
    }

    /// `tr((aZZᵀ + I)⁻¹)`.
    pub fn trace_inv(&self) -> f64 {
        let r = self.eigvals.len();
        (self.m - r) as f64 + self.eigvals.iter().map(|&l| 1.0 / (self.a * l + 1.0)).sum::<f64>()
    }

    /// Dense `a·ZZᵀ + I` rebuilt from the factorization (small m only).
    pub fn dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::identity(self.m, self.m);
        for (l, &lam) in self.eigvals.iter().enumerate() {
            let u = self.eigvecs.column(l);
            out.ger(self.a * lam, &u, &u, 1.0);
        }
        out
    }
}

/// Spectral factorization of `a·Z₋ⱼZ₋ⱼᵀ + I`, where `Z₋ⱼ` drops column
/// `dropped_col` when given.
pub fn factor_proxy(z: &DMatrix<f64>, a: f64, dropped_col: Option<usize>) -> Result<ProxyFactor> {
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::InvalidInput(format!("decorrelation constant a must be >= 0, got {a}")));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("random-effect design Z"));
    }
    let m = z.nrows();
    if let Some(j) = dropped_col {
        if j >= z.ncols() {
            return Err(Error::Dimension(format!("dropped column {j} out of range for q = {}", z.ncols())));
        }
    }
    if a == 0.0 {
        let mut f = ProxyFactor::identity(m);
        f.dropped_col = dropped_col;
        return Ok(f);
    }
    let zr = match dropped_col {
        Some(j) => z.clone().remove_column(j),
        None => z.clone(),
    };
    let q = zr.ncols();
    let mut pairs: Vec<(f64, DVector<f64>)> = if q == 0 || m == 0 {
        Vec::new()
    } else if m <= q {
        let gram = &zr * zr.transpose();
        let eig = SymmetricEigen::new(gram);
        eig.eigenvalues.iter().enumerate().map(|(l, &v)| (v, eig.eigenvectors.column(l).into_owned())).collect()
    } else {
        let svd = SVD::new(zr, true, false);
        let u = svd.u.expect("left singular vectors requested");
        svd.singular_values.iter().enumerate().map(|(l, &s)| (s * s, u.column(l).into_owned())).collect()
    };
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    let top = pairs.first().map(|p| p.0).unwrap_or(0.0);
    let cutoff = RANK_TOL * top.max(1.0);
    pairs.retain(|p| p.0 > cutoff);
    let r = pairs.len();
    let mut eigvecs = DMatrix::zeros(m, r);
    let mut eigvals = Vec::with_capacity(r);
    for (l, (val, vec)) in pairs.into_iter().enumerate() {
        eigvals.push(val);
        eigvecs.set_column(l, &vec);
    }
    Ok(ProxyFactor { a, eigvals, eigvecs, m, dropped_col })
}

/// One subject's data after decorrelation by `(aZZᵀ + I)^{-1/2}`.
#[derive(Debug, Clone)]
pub struct DecorrelatedBlock {
    pub y_tilde: DVector<f64>,
    pub x_tilde: DMatrix<f64>,
    pub tr_inv: f64,
}

pub fn decorrelate(f: &ProxyFactor, y: &DVector<f64>, x: &DMatrix<f64>) -> Result<DecorrelatedBlock> {
    Ok(DecorrelatedBlock { y_tilde: f.apply_inv_sqrt_vec(y)?, x_tilde: f.apply_inv_sqrt(x)?, tr_inv: f.trace_inv() })
}

/// `wᵀ Σ_b^{-1/2} (Z diag(ψ) Zᵀ + σ²I) Σ_b^{-1/2} w`.
pub fn quad_form_theta(
    f_b: &ProxyFactor,
    z_full: &DMatrix<f64>,
    psi: &DVector<f64>,
    sigma_e2: f64,
    w: &DVector<f64>,
) -> Result<f64> {
    if z_full.nrows() != f_b.m() || psi.len() != z_full.ncols() {
        return Err(Error::Dimension(format!(
            "Z is {}x{}, psi has {} entries, proxy has {} rows",
            z_full.nrows(),
            z_full.ncols(),
            psi.len(),
            f_b.m()
        )));
    }
    let u = f_b.apply_inv_sqrt_vec(w)?;
    let zu = z_full.tr_mul(&u);
    let random: f64 = zu.iter().zip(psi.iter()).map(|(c, p)| p * c * c).sum();
    Ok(random + sigma_e2 * u.norm_squared())
}
