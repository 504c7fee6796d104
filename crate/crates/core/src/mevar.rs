//! Mixed-effect VAR(1): each row of Φ is its own mixed model.
//!
//! For row r, subject i contributes yₜ = Yⁱ(t)ᵣ and design rows Yⁱ(t−1)ᵀ for
//! t = 1..T−1; the same lagged design serves as the random-effect design.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{center_columns, LmmDataset};
use crate::error::{Error, Result};
use crate::inference::{infer, InferenceConfig, InferenceRecord, Method};
use crate::lasso::CvMetric;

/// Row-`row` regression of a set of T×p series.
pub fn build_row_problem(series: &[DMatrix<f64>], row: usize, demean: bool) -> Result<LmmDataset> {
    let Some(first) = series.first() else {
        return Err(Error::TooFewSubjects { needed: 1, have: 0 });
    };
    let p = first.ncols();
    if row >= p {
        return Err(Error::Dimension(format!("row {row} out of range for p = {p}")));
    }
    let subjects = series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.ncols() != p {
                return Err(Error::Dimension(format!("subject {i}: {} columns, expected {p}", s.ncols())));
            }
            let t = s.nrows();
            if t < 3 {
                return Err(Error::InvalidInput(format!("subject {i}: series length {t} < 3")));
            }
            let s = if demean { center_columns(s)? } else { s.clone() };
            let x = s.rows(0, t - 1).into_owned();
            let y = s.view((1, row), (t - 1, 1)).column(0).into_owned();
            if x.column_iter().any(|c| c.iter().all(|&v| v == c[0])) {
                log::warn!("subject {i}: constant lagged column, design is degenerate");
            }
            Ok((i.to_string(), y, x))
        })
        .collect::<Result<Vec<_>>>()?;
    LmmDataset::with_shared_design(subjects)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MevarConfig {
    /// Inference settings; CV scores held-out raw prediction error by default.
    pub inference: InferenceConfig,
    /// Rows of Φ to fit (all when `None`).
    pub rows: Option<Vec<usize>>,
    /// Columns to infer within each row (all when `None`).
    pub coords: Option<Vec<usize>>,
    pub demean: bool,
}

impl Default for MevarConfig {
    fn default() -> Self {
        let mut inference = InferenceConfig::for_method(Method::Proposed, 0);
        inference.cv.metric = CvMetric::Raw;
        Self { inference, rows: None, coords: None, demean: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MevarEntry {
    pub row: usize,
    pub record: InferenceRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MevarFit {
    /// LASSO estimate per fitted row; NaN rows were not fitted or failed.
    pub phi_lasso: DMatrix<f64>,
    /// De-biased estimates where inference ran, LASSO elsewhere.
    pub phi_hat: DMatrix<f64>,
    pub entries: Vec<MevarEntry>,
    /// ‖Φ̂‖₂ over fitted rows (NaN entries treated as 0).
    pub spectral_norm: f64,
    pub failures: Vec<String>,
}

pub fn fit_mevar(series: &[DMatrix<f64>], cfg: &MevarConfig) -> Result<MevarFit> {
    let Some(first) = series.first() else {
        return Err(Error::TooFewSubjects { needed: 1, have: 0 });
    };
    let p = first.ncols();
    let rows: Vec<usize> = cfg.rows.clone().unwrap_or_else(|| (0..p).collect());
    let coords: Vec<usize> = cfg.coords.clone().unwrap_or_else(|| (0..p).collect());
    if let Some(&r) = rows.iter().chain(&coords).find(|&&r| r >= p) {
        return Err(Error::Dimension(format!("index {r} out of range for p = {p}")));
    }
    let outcomes: Vec<(usize, Result<(DVector<f64>, Vec<InferenceRecord>, Vec<(usize, String)>)>)> = rows
        .par_iter()
        .map(|&r| {
            let out = build_row_problem(series, r, cfg.demean)
                .and_then(|ds| infer(&ds, &coords, &cfg.inference))
                .map(|run| (run.cv.fit.beta, run.records, run.failures));
            (r, out)
        })
        .collect();
    let mut phi_lasso = DMatrix::from_element(p, p, f64::NAN);
    let mut phi_hat = DMatrix::from_element(p, p, f64::NAN);
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (r, out) in outcomes {
        match out {
            Ok((beta, records, fails)) => {
                phi_lasso.row_mut(r).copy_from(&beta.transpose());
                phi_hat.row_mut(r).copy_from(&beta.transpose());
                for rec in records {
                    phi_hat[(r, rec.coord)] = rec.beta_db;
                    entries.push(MevarEntry { row: r, record: rec });
                }
                failures.extend(fails.into_iter().map(|(c, m)| format!("entry ({r}, {c}): {m}")));
            }
            Err(e) => failures.push(format!("row {r}: {e}")),
        }
    }
    let filled = phi_hat.map(|v| if v.is_nan() { 0.0 } else { v });
    let spectral_norm = filled.singular_values().amax();
    Ok(MevarFit { phi_lasso, phi_hat, entries, spectral_norm, failures })
}
