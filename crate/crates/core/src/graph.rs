//! Heterogeneous Gaussian graphical model by neighborhood inference.
//!
//! Every node is regressed on all others with the mixed-model machinery, the
//! two directed estimates of each edge are averaged, and p-values are
//! recomputed from the averaged strength and variance before a Holm step over
//! the upper triangle.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_neighborhood_dataset, neighbor_index, write_numeric_csv};
use crate::error::{Error, Result};
use crate::inference::{holm_adjust_partial, infer, two_sided_p, InferenceConfig, Method};
use crate::varcomp::{run_varcomp_pipeline, VarCompConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub inference: InferenceConfig,
    pub alpha: f64,
    pub with_heterogeneity: bool,
    pub varcomp: VarCompConfig,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            inference: InferenceConfig::for_method(Method::Proposed, 0),
            alpha: 0.05,
            with_heterogeneity: false,
            varcomp: VarCompConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphEstimate {
    pub p: usize,
    pub strength: DMatrix<f64>,
    pub variance: DMatrix<f64>,
    pub p_value: DMatrix<f64>,
    pub p_holm: DMatrix<f64>,
    pub adjacency: Vec<Vec<bool>>,
    pub heterogeneity: Option<DMatrix<f64>>,
    /// Directed estimates β̂_{j,k} (row j regressed on column k).
    pub directed: DMatrix<f64>,
    pub directed_variance: DMatrix<f64>,
    pub alpha: f64,
    pub failures: Vec<String>,
}

impl GraphEstimate {
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.p {
            for k in j + 1..self.p {
                if self.adjacency[j][k] {
                    out.push((j, k));
                }
            }
        }
        out
    }

    /// Recomputes adjacency at another level without refitting.
    pub fn adjacency_at(&self, alpha: f64) -> Vec<Vec<bool>> {
        adjacency_from(&self.p_holm, alpha)
    }
}

fn adjacency_from(p_holm: &DMatrix<f64>, alpha: f64) -> Vec<Vec<bool>> {
    let p = p_holm.nrows();
    (0..p).map(|j| (0..p).map(|k| j != k && p_holm[(j, k)] <= alpha).collect()).collect()
}

struct NodeResult {
    beta: Vec<f64>,
    var: Vec<f64>,
    psi: Option<Vec<f64>>,
    failures: Vec<String>,
}

fn fit_node(y_blocks: &[DMatrix<f64>], j: usize, cfg: &GraphConfig) -> NodeResult {
    let p = y_blocks[0].ncols();
    let mut res = NodeResult { beta: vec![f64::NAN; p], var: vec![f64::NAN; p], psi: None, failures: Vec::new() };
    let ds = match make_neighborhood_dataset(y_blocks, j) {
        Ok(ds) => ds,
        Err(e) => {
            res.failures.push(format!("node {j}: {e}"));
            return res;
        }
    };
    let coords: Vec<usize> = (0..p - 1).collect();
    match infer(&ds, &coords, &cfg.inference) {
        Ok(run) => {
            for r in run.records {
                let k = neighbor_index(j, r.coord);
                res.beta[k] = r.beta_db;
                res.var[k] = r.v_hat;
            }
            for (c, msg) in run.failures {
                res.failures.push(format!("edge {j}->{}: {msg}", neighbor_index(j, c)));
            }
        }
        Err(e) => res.failures.push(format!("node {j}: {e}")),
    }
    if cfg.with_heterogeneity {
        match run_varcomp_pipeline(&ds, cfg.inference.cv.seed, &cfg.varcomp) {
            Ok(est) => {
                let mut psi = vec![f64::NAN; p];
                for (k, v) in est.psi_hat.iter().enumerate() {
                    psi[neighbor_index(j, k)] = *v;
                }
                res.psi = Some(psi);
            }
            Err(e) => res.failures.push(format!("node {j} heterogeneity: {e}")),
        }
    }
    res
}

/// Fits the graph on per-subject T×p blocks (assumed centered).
pub fn fit_graph(y_blocks: &[DMatrix<f64>], cfg: &GraphConfig) -> Result<GraphEstimate> {
    let Some(first) = y_blocks.first() else {
        return Err(Error::TooFewSubjects { needed: 1, have: 0 });
    };
    let p = first.ncols();
    if p < 2 {
        return Err(Error::InvalidInput("graph needs at least 2 nodes".into()));
    }
    if y_blocks.iter().any(|b| b.ncols() != p) {
        return Err(Error::Dimension("subjects disagree on node count".into()));
    }
    let mut icfg = cfg.clone();
    icfg.inference.debias.alpha = cfg.alpha;
    let nodes: Vec<NodeResult> = (0..p).into_par_iter().map(|j| fit_node(y_blocks, j, &icfg)).collect();

    let mut directed = DMatrix::from_element(p, p, f64::NAN);
    let mut directed_variance = DMatrix::from_element(p, p, f64::NAN);
    let mut failures = Vec::new();
    for (j, n) in nodes.iter().enumerate() {
        for k in 0..p {
            if k != j {
                directed[(j, k)] = n.beta[k];
                directed_variance[(j, k)] = n.var[k];
            }
        }
        failures.extend(n.failures.iter().cloned());
    }

    let mut strength = DMatrix::zeros(p, p);
    let mut variance = DMatrix::zeros(p, p);
    let mut p_value = DMatrix::from_element(p, p, f64::NAN);
    let mut heterogeneity = cfg.with_heterogeneity.then(|| DMatrix::from_element(p, p, f64::NAN));
    let mut upper = Vec::new();
    for j in 0..p {
        for k in j + 1..p {
            let s = (directed[(j, k)] + directed[(k, j)]) / 2.0;
            let v = (directed_variance[(j, k)] + directed_variance[(k, j)]) / 2.0;
            let pv = if s.is_nan() || v.is_nan() { f64::NAN } else { two_sided_p(s, v) };
            strength[(j, k)] = s;
            strength[(k, j)] = s;
            variance[(j, k)] = v;
            variance[(k, j)] = v;
            p_value[(j, k)] = pv;
            p_value[(k, j)] = pv;
            if let Some(h) = heterogeneity.as_mut() {
                let pj = nodes[j].psi.as_ref().map_or(f64::NAN, |v| v[k]);
                let pk = nodes[k].psi.as_ref().map_or(f64::NAN, |v| v[j]);
                let avg = (pj + pk) / 2.0;
                h[(j, k)] = avg;
                h[(k, j)] = avg;
            }
            upper.push((j, k, pv));
        }
    }
    let adj = holm_adjust_partial(&upper.iter().map(|u| u.2).collect::<Vec<_>>())?;
    let mut p_holm = DMatrix::from_element(p, p, f64::NAN);
    for ((j, k, _), h) in upper.iter().zip(adj) {
        p_holm[(*j, *k)] = h;
        p_holm[(*k, *j)] = h;
    }
    for failure in &failures {
        log::warn!("{failure}");
    }
    Ok(GraphEstimate {
        p,
        adjacency: adjacency_from(&p_holm, cfg.alpha),
        strength,
        variance,
        p_value,
        p_holm,
        heterogeneity,
        directed,
        directed_variance,
        alpha: cfg.alpha,
        failures,
    })
}

/// Keeps rows 0, f, 2f, ….
pub fn downsample_series(series: &DMatrix<f64>, factor: usize) -> Result<DMatrix<f64>> {
    if factor < 1 {
        return Err(Error::InvalidInput("downsample factor must be >= 1".into()));
    }
    let rows: Vec<usize> = (0..series.nrows()).step_by(factor).collect();
    Ok(series.select_rows(rows.iter()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeComparisonRow {
    pub node_a: usize,
    pub node_b: usize,
    pub strength_a: f64,
    pub strength_b: f64,
    pub p_holm_a: f64,
    pub p_holm_b: f64,
    pub significant_a: bool,
    pub significant_b: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub rows: Vec<EdgeComparisonRow>,
    pub shared: Vec<(usize, usize)>,
    pub only_a: Vec<(usize, usize)>,
    pub only_b: Vec<(usize, usize)>,
}

/// Edge-by-edge comparison of two graphs over the same nodes.
pub fn compare_groups(a: &GraphEstimate, b: &GraphEstimate) -> Result<GroupComparison> {
    if a.p != b.p {
        return Err(Error::Dimension(format!("graphs have {} and {} nodes", a.p, b.p)));
    }
    let ea: BTreeSet<_> = a.edges().into_iter().collect();
    let eb: BTreeSet<_> = b.edges().into_iter().collect();
    let mut rows = Vec::new();
    for j in 0..a.p {
        for k in j + 1..a.p {
            rows.push(EdgeComparisonRow {
                node_a: j,
                node_b: k,
                strength_a: a.strength[(j, k)],
                strength_b: b.strength[(j, k)],
                p_holm_a: a.p_holm[(j, k)],
                p_holm_b: b.p_holm[(j, k)],
                significant_a: a.adjacency[j][k],
                significant_b: b.adjacency[j][k],
            });
        }
    }
    Ok(GroupComparison {
        rows,
        shared: ea.intersection(&eb).copied().collect(),
        only_a: ea.difference(&eb).copied().collect(),
        only_b: eb.difference(&ea).copied().collect(),
    })
}

/// `node_a,node_b,strength,se,p_value,p_holm,significant[,heterogeneity]`, one row per pair.
pub fn write_edges_csv(path: &Path, g: &GraphEstimate) -> Result<()> {
    let io = |e| Error::Io { path: path.to_path_buf(), source: e };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let het_col = if g.heterogeneity.is_some() { ",heterogeneity" } else { "" };
    writeln!(f, "node_a,node_b,strength,se,p_value,p_holm,significant{het_col}").map_err(io)?;
    for j in 0..g.p {
        for k in j + 1..g.p {
            let het = g.heterogeneity.as_ref().map_or(String::new(), |h| format!(",{}", h[(j, k)]));
            writeln!(
                f,
                "{j},{k},{},{},{},{},{}{het}",
                g.strength[(j, k)],
                g.variance[(j, k)].sqrt(),
                g.p_value[(j, k)],
                g.p_holm[(j, k)],
                u8::from(g.adjacency[j][k]),
            )
            .map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

pub fn write_adjacency_csv(path: &Path, g: &GraphEstimate) -> Result<()> {
    let m = DMatrix::from_fn(g.p, g.p, |j, k| if g.adjacency[j][k] { 1.0 } else { 0.0 });
    write_numeric_csv(path, None, &m)
}

pub fn graph_summary_json(g: &GraphEstimate) -> serde_json::Value {
    let edges = g.edges().len();
    let pairs = g.p * (g.p - 1) / 2;
    serde_json::json!({
        "nodes": g.p,
        "alpha": g.alpha,
        "edges": edges,
        "pairs": pairs,
        "density": edges as f64 / pairs as f64,
        "failures": g.failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lasso::CvConfig;
    use crate::rng::KeyedRng;
    use rand_distr::{Distribution, StandardNormal};

    /// Chain graph 0 - 1 - 2 (- 3 …) with per-subject blocks.
    fn chain_blocks(n: usize, m: usize, p: usize, key: u64) -> Vec<DMatrix<f64>> {
        (0..n)
            .map(|i| {
                let mut r = KeyedRng::new(key + i as u64);
                let mut y = DMatrix::zeros(m, p);
                for t in 0..m {
                    let mut prev = 0.0;
                    for j in 0..p {
                        let e: f64 = StandardNormal.sample(&mut r);
                        let v = 0.6 * prev + e;
                        y[(t, j)] = v;
                        prev = v;
                    }
                }
                crate::dataset::center_columns(&y).unwrap()
            })
            .collect()
    }

    fn small_cfg() -> GraphConfig {
        let mut cfg = GraphConfig::default();
        cfg.inference.cv = CvConfig { folds: 3, a_grid: vec![1.0], n_lambdas: 20, ..Default::default() };
        cfg
    }

    #[test]
    fn two_nodes_single_edge() {
        let blocks = chain_blocks(8, 10, 2, 1);
        let g = fit_graph(&blocks, &small_cfg()).unwrap();
        let mean = (g.directed[(0, 1)] + g.directed[(1, 0)]) / 2.0;
        assert_eq!(g.strength[(0, 1)], mean);
        assert_eq!(g.strength[(1, 0)], mean);
    }

    #[test]
    fn layers_symmetric_and_holm_monotone() {
        let blocks = chain_blocks(10, 12, 4, 2);
        let g = fit_graph(&blocks, &small_cfg()).unwrap();
        assert_eq!(g.strength, g.strength.transpose());
        assert_eq!(g.variance, g.variance.transpose());
        for j in 0..4 {
            for k in 0..4 {
                if g.adjacency_at(0.01)[j][k] {
                    assert!(g.adjacency_at(0.05)[j][k]);
                }
            }
        }
        assert!(g.adjacency[0][1]);
    }

    #[test]
    fn relabeling_equivariance() {
        let blocks = chain_blocks(10, 12, 3, 3);
        let perm = [2usize, 0, 1];
        let permuted: Vec<_> = blocks.iter().map(|b| b.select_columns(perm.iter())).collect();
        let cfg = small_cfg();
        let g = fit_graph(&blocks, &cfg).unwrap();
        let h = fit_graph(&permuted, &cfg).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                if j != k {
                    let a = g.strength[(perm[j], perm[k])];
                    let b = h.strength[(j, k)];
                    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn downsample_examples() {
        let s = DMatrix::from_fn(7, 2, |r, c| (r * 2 + c) as f64);
        assert_eq!(downsample_series(&s, 1).unwrap(), s);
        let d = downsample_series(&s, 3).unwrap();
        assert_eq!(d.nrows(), 3);
        assert_eq!(d.row(1), s.row(3));
        assert_eq!(d.row(2), s.row(6));
        assert_eq!(downsample_series(&DMatrix::zeros(1200, 1), 10).unwrap().nrows(), 120);
        assert!(downsample_series(&s, 0).is_err());
    }

    fn graph_with(p: usize, edges: &[(usize, usize)]) -> GraphEstimate {
        let mut adjacency = vec![vec![false; p]; p];
        for &(j, k) in edges {
            adjacency[j][k] = true;
            adjacency[k][j] = true;
        }
        let z = DMatrix::zeros(p, p);
        GraphEstimate {
            p,
            strength: z.clone(),
            variance: z.clone(),
            p_value: z.clone(),
            p_holm: z.clone(),
            adjacency,
            heterogeneity: None,
            directed: z.clone(),
            directed_variance: z,
            alpha: 0.05,
            failures: vec![],
        }
    }

    #[test]
    fn comparison_set_arithmetic() {
        let a = graph_with(5, &[(0, 1), (1, 2), (2, 3)]);
        let b = graph_with(5, &[(0, 4), (3, 4)]);
        let c = compare_groups(&a, &b).unwrap();
        assert!(c.shared.is_empty());
        assert_eq!((c.only_a.len(), c.only_b.len()), (3, 2));
        let same = compare_groups(&a, &a).unwrap();
        assert!(same.only_a.is_empty() && same.only_b.is_empty());
        let empty = graph_with(5, &[]);
        assert!(compare_groups(&a, &empty).unwrap().shared.is_empty());
        assert!(compare_groups(&a, &graph_with(4, &[])).is_err());
        assert_eq!(c.rows.len(), 10);
    }

    #[test]
    fn outputs_written() {
        let blocks = chain_blocks(8, 10, 3, 4);
        let mut cfg = small_cfg();
        cfg.with_heterogeneity = true;
        cfg.varcomp.cv.folds = 2;
        cfg.varcomp.theta_folds = 2;
        let g = fit_graph(&blocks, &cfg).unwrap();
        let h = g.heterogeneity.as_ref().unwrap();
        for j in 0..3 {
            for k in 0..3 {
                assert_eq!(h[(j, k)].to_bits(), h[(k, j)].to_bits());
            }
        }
        let dir = tempfile::tempdir().unwrap();
        write_edges_csv(&dir.path().join("edges.csv"), &g).unwrap();
        write_adjacency_csv(&dir.path().join("adj.csv"), &g).unwrap();
        let text = std::fs::read_to_string(dir.path().join("edges.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(graph_summary_json(&g)["pairs"], 3);
    }
}
