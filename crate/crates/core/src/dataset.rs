//! Multi-subject data containers, CSV/manifest I/O and subject partitions.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{KeyedRng, Stream};

/// Default ratio max(mᵢ)/min(mᵢ) above which loading logs a warning.
pub const DEFAULT_MAX_ROW_RATIO: f64 = 4.0;

/// One subject's response, fixed-effect design and random-effect design.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBlock {
    pub subject_id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl SubjectBlock {
    pub fn rows(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmDataset {
    blocks: Vec<SubjectBlock>,
    p: usize,
    q: usize,
    column_map: Vec<usize>,
    total_rows: usize,
}

fn validate_column_map(column_map: &[usize], p: usize) -> Result<()> {
    if column_map.is_empty() {
        return Err(Error::InvalidInput("column_map must select at least one column".into()));
    }
    let mut seen = HashSet::with_capacity(column_map.len());
    for &c in column_map {
        if c >= p {
            return Err(Error::MapOutOfRange { index: c, p });
        }
        if !seen.insert(c) {
            return Err(Error::DuplicateMapEntry(c));
        }
    }
    Ok(())
}

impl LmmDataset {
    /// Builds a dataset from `(subject_id, y, X)` triples; Z is copied from the
    /// X columns named by `column_map`.
    pub fn new(subjects: Vec<(String, DVector<f64>, DMatrix<f64>)>, column_map: Vec<usize>) -> Result<Self> {
        let Some((_, _, x0)) = subjects.first() else {
            return Err(Error::TooFewSubjects { needed: 1, have: 0 });
        };
        let p = x0.ncols();
        if p == 0 {
            return Err(Error::Dimension("X has no columns".into()));
        }
        validate_column_map(&column_map, p)?;
        let mut blocks = Vec::with_capacity(subjects.len());
        for (id, y, x) in subjects {
            if x.ncols() != p {
                return Err(Error::Dimension(format!("subject {id}: X has {} columns, expected {p}", x.ncols())));
            }
            if y.len() != x.nrows() {
                return Err(Error::Dimension(format!("subject {id}: y has {} rows but X has {}", y.len(), x.nrows())));
            }
            if y.is_empty() {
                return Err(Error::Dimension(format!("subject {id}: no rows")));
            }
            if !y.iter().chain(x.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("subject data"));
            }
            let z = x.select_columns(column_map.iter());
            blocks.push(SubjectBlock { subject_id: id, y, x, z });
        }
        let total_rows = blocks.iter().map(|b| b.rows()).sum();
        let ds = Self { blocks, p, q: column_map.len(), column_map, total_rows };
        if let Some(ratio) = ds.row_ratio_exceeding(DEFAULT_MAX_ROW_RATIO) {
            log::warn!("unbalanced subjects: max(m)/min(m) = {ratio:.2}");
        }
        Ok(ds)
    }

    /// Dataset whose random-effect design equals the full fixed-effect design.
    pub fn with_shared_design(subjects: Vec<(String, DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        let p = subjects.first().map(|s| s.2.ncols()).unwrap_or(0);
        Self::new(subjects, (0..p).collect())
    }

    pub fn blocks(&self) -> &[SubjectBlock] {
        &self.blocks
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn column_map(&self) -> &[usize] {
        &self.column_map
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    /// Z column holding X column `x_col`, if any.
    pub fn z_column_of(&self, x_col: usize) -> Option<usize> {
        self.column_map.iter().position(|&c| c == x_col)
    }

    /// Some(ratio) when max(mᵢ)/min(mᵢ) exceeds `limit`.
    pub fn row_ratio_exceeding(&self, limit: f64) -> Option<f64> {
        let max = self.blocks.iter().map(|b| b.rows()).max()?;
        let min = self.blocks.iter().map(|b| b.rows()).min()?;
        let ratio = max as f64 / min as f64;
        (ratio > limit).then_some(ratio)
    }

    /// Sub-dataset over the given subject indices, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let blocks: Vec<SubjectBlock> = idx.iter().map(|&i| self.blocks[i].clone()).collect();
        let total_rows = blocks.iter().map(|b| b.rows()).sum();
        Self { blocks, p: self.p, q: self.q, column_map: self.column_map.clone(), total_rows }
    }

    /// Same designs with a replacement response per subject.
    pub fn with_responses(&self, ys: Vec<DVector<f64>>) -> Result<Self> {
        if ys.len() != self.n() {
            return Err(Error::Dimension("one response per subject required".into()));
        }
        let mut out = self.clone();
        for (b, y) in out.blocks.iter_mut().zip(ys) {
            if y.len() != b.rows() {
                return Err(Error::Dimension(format!("subject {}: response length", b.subject_id)));
            }
            b.y = y;
        }
        Ok(out)
    }

    pub fn partition(&self, kind: PartitionKind, seed: u64) -> Result<SubjectPartition> {
        partition_subjects(self, kind, seed)
    }
}

/// Centers each column of one subject's matrix at zero.
pub fn center_columns(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = y.nrows();
    if m < 2 {
        return Err(Error::InvalidInput(format!("centering needs at least 2 rows, got {m}")));
    }
    let mut out = y.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / m as f64;
        col.add_scalar_mut(-mean);
        // second pass removes the residual roundoff from the first subtraction
        let resid = col.sum() / m as f64;
        col.add_scalar_mut(-resid);
    }
    Ok(out)
}

/// Centers each column using the mean over all subjects' rows.
pub fn center_columns_pooled(blocks: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let Some(first) = blocks.first() else {
        return Ok(Vec::new());
    };
    let p = first.ncols();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    if rows < 2 {
        return Err(Error::InvalidInput("pooled centering needs at least 2 rows".into()));
    }
    let mut mean = DVector::zeros(p);
    for b in blocks {
        if b.ncols() != p {
            return Err(Error::Dimension("blocks disagree on column count".into()));
        }
        for (j, col) in b.column_iter().enumerate() {
            mean[j] += col.sum();
        }
    }
    mean /= rows as f64;
    Ok(blocks
        .iter()
        .map(|b| {
            let mut c = b.clone();
            for (j, mut col) in c.column_iter_mut().enumerate() {
                col.add_scalar_mut(-mean[j]);
            }
            c
        })
        .collect())
}

/// Neighborhood regression for node `j`: response column j, covariates (fixed and
/// random) all other columns.
pub fn make_neighborhood_dataset(y_blocks: &[DMatrix<f64>], j: usize) -> Result<LmmDataset> {
    let Some(first) = y_blocks.first() else {
        return Err(Error::TooFewSubjects { needed: 1, have: 0 });
    };
    let p = first.ncols();
    if p < 2 {
        return Err(Error::InvalidInput("node regression needs at least 2 nodes".into()));
    }
    if j >= p {
        return Err(Error::InvalidInput(format!("node index {j} out of range for p = {p}")));
    }
    let keep: Vec<usize> = (0..p).filter(|&k| k != j).collect();
    let subjects = y_blocks
        .iter()
        .enumerate()
        .map(|(i, yb)| {
            if yb.ncols() != p {
                return Err(Error::Dimension(format!("subject {i}: {} columns, expected {p}", yb.ncols())));
            }
            Ok((i.to_string(), yb.column(j).into_owned(), yb.select_columns(keep.iter())))
        })
        .collect::<Result<Vec<_>>>()?;
    LmmDataset::with_shared_design(subjects)
}

/// Original node index of neighborhood covariate `k` for node `j`.
pub fn neighbor_index(j: usize, k: usize) -> usize {
    if k < j {
        k
    } else {
        k + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    CvFolds(usize),
    ThreeWaySplit,
}

impl PartitionKind {
    pub fn parts(&self) -> usize {
        match self {
            PartitionKind::CvFolds(k) => *k,
            PartitionKind::ThreeWaySplit => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectPartition {
    /// Fold index for each subject, aligned with the dataset's block order.
    pub assignment: Vec<usize>,
    pub subject_ids: Vec<String>,
    pub kind: PartitionKind,
}

impl SubjectPartition {
    pub fn parts(&self) -> usize {
        self.kind.parts()
    }

    pub fn members(&self, part: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == part).collect()
    }

    pub fn complement(&self, part: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != part).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.parts()).map(|k| self.assignment.iter().filter(|&&a| a == k).count()).collect()
    }

    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.subject_ids.iter().position(|s| s == subject_id).map(|i| self.assignment[i])
    }
}

/// Shuffles subject indices with the keyed stream, then deals them round-robin.
pub fn partition_indices(n: usize, kind: PartitionKind, seed: u64) -> Result<Vec<usize>> {
    let parts = kind.parts();
    match kind {
        PartitionKind::CvFolds(k) if k < 2 => {
            return Err(Error::InvalidInput(format!("need at least 2 folds, got {k}")));
        }
        _ => {}
    }
    if n < parts {
        return Err(Error::TooFewSubjects { needed: parts, have: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = KeyedRng::from_parts(&[seed, Stream::Partition as u64, parts as u64]);
    for i in (1..n).rev() {
        let j = (rng.uniform() * (i + 1) as f64) as usize;
        order.swap(i, j.min(i));
    }
    let mut assignment = vec![0; n];
    for (slot, &subject) in order.iter().enumerate() {
        assignment[subject] = slot % parts;
    }
    Ok(assignment)
}

pub fn partition_subjects(ds: &LmmDataset, kind: PartitionKind, seed: u64) -> Result<SubjectPartition> {
    let assignment = partition_indices(ds.n(), kind, seed)?;
    Ok(SubjectPartition { assignment, subject_ids: ds.blocks.iter().map(|b| b.subject_id.clone()).collect(), kind })
}

// ---------------------------------------------------------------------------
// CSV and manifest I/O

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub subject_id: Option<String>,
}

/// JSON manifest listing subject files in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<ManifestEntry>,
    #[serde(default)]
    pub column_map: Option<Vec<usize>>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for e in &mut m.subjects {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.subjects.iter().map(|e| e.path.clone()).collect()
    }
}

/// Reads a numeric CSV into a matrix. A first row that does not parse as
/// numbers is taken as a header.
pub fn read_numeric_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    parse_numeric_csv(&text, path)
}

pub fn parse_numeric_csv(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = cells.iter().map(|c| c.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if rows.is_empty() && width.is_none() => {
                // header
                width = Some(cells.len());
                continue;
            }
            Err(_) => {
                let bad = cells.iter().find(|c| c.parse::<f64>().is_err()).copied().unwrap_or("");
                return Err(Error::Parse {
                    path: path.into(),
                    row: line_no + 1,
                    msg: format!("non-numeric cell {bad:?}"),
                });
            }
        };
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse { path: path.into(), row: line_no + 1, msg: format!("non-finite value {bad}") });
        }
        match width {
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    path: path.into(),
                    row: line_no + 1,
                    msg: format!("expected {w} columns, found {}", values.len()),
                })
            }
            None => width = Some(values.len()),
            _ => {}
        }
        rows.push(values);
    }
    let ncols = width.unwrap_or(0);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn write_numeric_csv(path: &Path, header: Option<&[String]>, mat: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in mat.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|source| Error::Io { path: path.into(), source })?;
    f.write_all(out.as_bytes()).map_err(|source| Error::Io { path: path.into(), source })
}

/// Loads one CSV per subject (first column y, remaining columns X).
pub fn load_dataset(subject_files: &[PathBuf], column_map: &[usize]) -> Result<LmmDataset> {
    load_dataset_with_ids(subject_files, None, column_map)
}

pub fn load_dataset_with_ids(
    subject_files: &[PathBuf],
    ids: Option<&[Option<String>]>,
    column_map: &[usize],
) -> Result<LmmDataset> {
    let mut subjects = Vec::with_capacity(subject_files.len());
    let mut p = None;
    for (i, path) in subject_files.iter().enumerate() {
        let mat = read_numeric_csv(path)?;
        if mat.ncols() < 2 {
            return Err(Error::Parse {
                path: path.clone(),
                row: 0,
                msg: "need a y column and at least one X column".into(),
            });
        }
        if mat.nrows() == 0 {
            return Err(Error::Parse { path: path.clone(), row: 0, msg: "no data rows".into() });
        }
        let this_p = mat.ncols() - 1;
        match p {
            Some(q) if q != this_p => {
                return Err(Error::Dimension(format!(
                    "{}: {this_p} covariate columns, earlier files have {q}",
                    path.display()
                )))
            }
            _ => p = Some(this_p),
        }
        let id = ids.and_then(|v| v.get(i).cloned().flatten()).unwrap_or_else(|| {
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| i.to_string())
        });
        let y = mat.column(0).into_owned();
        let x = mat.columns(1, this_p).into_owned();
        subjects.push((id, y, x));
    }
    LmmDataset::new(subjects, column_map.to_vec())
}

pub fn load_manifest(path: &Path) -> Result<LmmDataset> {
    let m = Manifest::read(path)?;
    let ids: Vec<Option<String>> = m.subjects.iter().map(|e| e.subject_id.clone()).collect();
    let paths = m.paths();
    let column_map = match &m.column_map {
        Some(c) => c.clone(),
        None => {
            let first = paths.first().ok_or(Error::TooFewSubjects { needed: 1, have: 0 })?;
            let p = read_numeric_csv(first)?.ncols().saturating_sub(1);
            (0..p).collect()
        }
    };
    load_dataset_with_ids(&paths, Some(&ids), &column_map)
}

/// Loads one T×p series per manifest entry (graph and VAR inputs).
pub fn load_series_manifest(path: &Path) -> Result<Vec<DMatrix<f64>>> {
    let m = Manifest::read(path)?;
    if m.subjects.is_empty() {
        return Err(Error::TooFewSubjects { needed: 1, have: 0 });
    }
    let series = m.paths().iter().map(|p| read_numeric_csv(p)).collect::<Result<Vec<_>>>()?;
    let p = series[0].ncols();
    for (s, e) in series.iter().zip(&m.subjects) {
        if s.ncols() != p || s.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "{}: {}x{} series, expected {p} columns",
                e.path.display(),
                s.nrows(),
                s.ncols()
            )));
        }
    }
    Ok(series)
}

/// Writes one series CSV per subject plus a manifest into `dir`.
pub fn write_series_manifest(series: &[DMatrix<f64>], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    let mut entries = Vec::with_capacity(series.len());
    for (i, s) in series.iter().enumerate() {
        let header: Vec<String> = (0..s.ncols()).map(|j| format!("v{j}")).collect();
        let file = format!("series_{i:04}.csv");
        write_numeric_csv(&dir.join(&file), Some(&header), s)?;
        entries.push(ManifestEntry { path: PathBuf::from(file), subject_id: Some(format!("s{i:04}")) });
    }
    let path = dir.join("manifest.json");
    Manifest { subjects: entries, column_map: None }.write(&path)?;
    Ok(path)
}

/// Writes one CSV per subject plus a manifest into `dir`.
pub fn write_dataset(ds: &LmmDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    let mut entries = Vec::with_capacity(ds.n());
    let header: Vec<String> = std::iter::once("y".to_string()).chain((0..ds.p()).map(|j| format!("x{j}"))).collect();
    for (i, b) in ds.blocks().iter().enumerate() {
        let file = format!("subject_{i:04}.csv");
        let mut mat = DMatrix::zeros(b.rows(), ds.p() + 1);
        mat.set_column(0, &b.y);
        mat.columns_mut(1, ds.p()).copy_from(&b.x);
        write_numeric_csv(&dir.join(&file), Some(&header), &mat)?;
        entries.push(ManifestEntry { path: PathBuf::from(file), subject_id: Some(b.subject_id.clone()) });
    }
    let manifest = Manifest { subjects: entries, column_map: Some(ds.column_map().to_vec()) };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::KeyedRng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_mat(rows: usize, cols: usize, key: u64) -> DMatrix<f64> {
        let mut r = KeyedRng::new(key);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
    }

    #[test]
    fn shapes_from_two_files() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..2 {
            fs::write(dir.path().join(format!("s{i}.csv")), "1,2,3\n4,5,6\n7,8,9\n").unwrap();
        }
        let files: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("s{i}.csv"))).collect();
        let ds = load_dataset(&files, &[0, 1]).unwrap();
        assert_eq!((ds.n(), ds.p(), ds.q()), (2, 2, 2));
        assert_eq!(ds.total_rows(), 6);
        assert_eq!(ds.blocks()[0].y[2], 7.0);
        assert_eq!(ds.blocks()[0].z, ds.blocks()[0].x);
    }

    #[test]
    fn duplicate_map_entries_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("s.csv");
        fs::write(&f, "1,2,3\n4,5,6\n").unwrap();
        let err = load_dataset(&[f], &[0, 0]).unwrap_err();
        assert!(err.to_string().contains("duplicate map entries"), "{err}");
    }

    #[test]
    fn map_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("s.csv");
        fs::write(&f, "1,2,3\n4,5,6\n").unwrap();
        assert!(matches!(load_dataset(&[f], &[2]), Err(Error::MapOutOfRange { index: 2, p: 2 })));
    }

    #[test]
    fn nan_cell_reports_file_and_row() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("bad.csv");
        fs::write(&f, "y,a,b\n1,2,3\n4,NaN,6\n").unwrap();
        let err = load_dataset(&[f], &[0]).unwrap_err();
        match err {
            Error::Parse { path, row, .. } => {
                assert!(path.ends_with("bad.csv"));
                assert_eq!(row, 3);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn text_cell_after_header_is_error() {
        let err = parse_numeric_csv("1,2\nfoo,3\n", Path::new("x.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }));
    }

    #[test]
    fn scientific_notation_and_header() {
        let m = parse_numeric_csv("y,x\n1e-3,2.5E2\n", Path::new("x.csv")).unwrap();
        assert_eq!(m.nrows(), 1);
        assert_eq!(m[(0, 0)], 1e-3);
        assert_eq!(m[(0, 1)], 250.0);
    }

    #[test]
    fn dimension_mismatch_across_subjects() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        fs::write(&a, "1,2,3\n").unwrap();
        fs::write(&b, "1,2\n").unwrap();
        assert!(matches!(load_dataset(&[a, b], &[0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn write_then_load_is_exact() {
        let subjects = (0..3)
            .map(|i| (format!("s{i}"), rand_mat(4, 1, i).column(0).into_owned(), rand_mat(4, 3, 10 + i)))
            .collect();
        let ds = LmmDataset::new(subjects, vec![2, 0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let back = load_manifest(&manifest).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn neighborhood_column_drop() {
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let ds = make_neighborhood_dataset(&[y], 1).unwrap();
        assert_eq!((ds.p(), ds.q()), (2, 2));
        let b = &ds.blocks()[0];
        assert_eq!(b.x, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 4.0, 6.0]));
        assert_eq!(b.y.as_slice(), &[2.0, 5.0]);
    }

    #[test]
    fn neighborhood_single_node_is_error() {
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(make_neighborhood_dataset(&[y], 0).is_err());
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(make_neighborhood_dataset(&[y], 2).is_err());
    }

    #[test]
    fn neighborhood_matches_column_extraction() {
        let ys: Vec<DMatrix<f64>> = (0..2).map(|i| rand_mat(4, 5, 100 + i)).collect();
        let ds = make_neighborhood_dataset(&ys, 0).unwrap();
        for (b, y) in ds.blocks().iter().zip(&ys) {
            for r in 0..4 {
                for k in 0..4 {
                    assert_eq!(b.x[(r, k)], y[(r, k + 1)]);
                }
                assert_eq!(b.y[r], y[(r, 0)]);
            }
        }
    }

    #[test]
    fn neighborhood_reinsertion_reconstructs() {
        let ys: Vec<DMatrix<f64>> = (0..2).map(|i| rand_mat(5, 4, 200 + i)).collect();
        for j in 0..4 {
            let ds = make_neighborhood_dataset(&ys, j).unwrap();
            for (b, y) in ds.blocks().iter().zip(&ys) {
                let mut rebuilt = DMatrix::zeros(5, 4);
                rebuilt.set_column(j, &b.y);
                for k in 0..3 {
                    rebuilt.set_column(neighbor_index(j, k), &b.x.column(k));
                }
                assert_eq!(&rebuilt, y);
            }
        }
    }

    #[test]
    fn centering_cases() {
        let c = center_columns(&DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(c.as_slice(), &[-1.0, 0.0, 1.0]);
        let z = center_columns(&DMatrix::zeros(4, 2)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let r = center_columns(&(rand_mat(10, 3, 5) * 7.0)).unwrap();
        for col in r.column_iter() {
            assert!((col.sum() / 10.0).abs() < 1e-12);
        }
        assert!(center_columns(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn three_way_sizes() {
        let mut s = partition_indices(9, PartitionKind::ThreeWaySplit, 1).unwrap();
        let sizes = |a: &[usize]| (0..3).map(|k| a.iter().filter(|&&v| v == k).count()).collect::<Vec<_>>();
        assert_eq!(sizes(&s), vec![3, 3, 3]);
        s = partition_indices(10, PartitionKind::ThreeWaySplit, 1).unwrap();
        let mut sz = sizes(&s);
        sz.sort();
        assert_eq!(sz, vec![3, 3, 4]);
        assert!(partition_indices(2, PartitionKind::ThreeWaySplit, 1).is_err());
        assert!(partition_indices(3, PartitionKind::CvFolds(4), 1).is_err());
    }

    #[test]
    fn folds_deterministic() {
        let a = partition_indices(30, PartitionKind::CvFolds(5), 99).unwrap();
        let b = partition_indices(30, PartitionKind::CvFolds(5), 99).unwrap();
        assert_eq!(a, b);
        let c = partition_indices(30, PartitionKind::CvFolds(5), 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unbalanced_rows_detected() {
        let subjects = vec![
            ("a".to_string(), DVector::zeros(2), DMatrix::zeros(2, 1)),
            ("b".to_string(), DVector::zeros(10), DMatrix::zeros(10, 1)),
        ];
        let ds = LmmDataset::new(subjects, vec![0]).unwrap();
        assert_eq!(ds.row_ratio_exceeding(4.0), Some(5.0));
    }

    proptest::proptest! {
        #[test]
        fn partition_is_bijection(n in 3usize..60, k in 2usize..6, seed in 0u64..1000) {
            proptest::prop_assume!(n >= k);
            for kind in [PartitionKind::CvFolds(k), PartitionKind::ThreeWaySplit] {
                let a = partition_indices(n, kind, seed).unwrap();
                proptest::prop_assert_eq!(a.len(), n);
                let parts = kind.parts();
                let sizes: Vec<usize> = (0..parts).map(|f| a.iter().filter(|&&v| v == f).count()).collect();
                proptest::prop_assert_eq!(sizes.iter().sum::<usize>(), n);
                let max = *sizes.iter().max().unwrap();
                let min = *sizes.iter().min().unwrap();
                proptest::prop_assert!(max - min <= 1);
            }
        }
    }
}
