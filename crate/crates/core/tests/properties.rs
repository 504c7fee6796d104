use hetlmm::mevar::{build_row_problem, fit_mevar, MevarConfig};
use hetlmm::proxy::factor_proxy;
use hetlmm::rng::KeyedRng;
use hetlmm::sim::{run_monte_carlo, SimConfig};
use hetlmm::varcomp::{solve_psi, MomentSystem, PsiSolverOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = KeyedRng::new(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn proxy_inverse_and_trace_match_dense(m in 1usize..7, q in 1usize..7, a in 0.0f64..20.0, seed in 0u64..1000) {
        let z = gauss(m, q, seed);
        let f = factor_proxy(&z, a, None).unwrap();
        let dense = &z * z.transpose() * a + DMatrix::identity(m, m);
        let inv = dense.clone().try_inverse().unwrap();
        let v = DVector::from_fn(m, |i, _| i as f64 - 1.5);
        let got = f.apply_inv(&v).unwrap();
        prop_assert!((&got - &inv * &v).amax() <= 1e-9 * (1.0 + got.amax()));
        prop_assert!((f.trace_inv() - inv.trace()).abs() <= 1e-9 * inv.trace());
    }

    #[test]
    fn diagonal_moment_system_soft_thresholds(
        b in proptest::collection::vec(0.5f64..5.0, 1..8),
        seed in 0u64..1000,
        lambda in 0.0f64..4.0,
    ) {
        let q = b.len();
        let delta = gauss(q, 1, seed).column(0).into_owned() * 2.0;
        let sys = MomentSystem { b: DMatrix::from_diagonal(&DVector::from_vec(b.clone())), delta: delta.clone(), c: 0.0, subjects: vec![] };
        let fit = solve_psi(&sys, lambda, None, &PsiSolverOptions::default()).unwrap();
        for k in 0..q {
            prop_assert!((fit.psi[k] - soft(delta[k], lambda / 2.0) / b[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn lag_design_is_the_shifted_series(t in 3usize..12, p in 1usize..5, subjects in 1usize..4, seed in 0u64..1000) {
        let series: Vec<DMatrix<f64>> = (0..subjects).map(|i| gauss(t, p, seed * 7 + i as u64)).collect();
        let row = seed as usize % p;
        let ds = build_row_problem(&series, row, false).unwrap();
        for (b, s) in ds.blocks().iter().zip(&series) {
            prop_assert_eq!(b.y.len(), t - 1);
            for r in 0..t - 1 {
                prop_assert_eq!(b.y[r], s[(r + 1, row)]);
                for c in 0..p {
                    prop_assert_eq!(b.x[(r, c)], s[(r, c)]);
                    prop_assert_eq!(b.z[(r, c)], s[(r, c)]);
                }
            }
        }
    }
}

#[test]
fn monte_carlo_is_reproducible() {
    let cfg = SimConfig::from_json(r#"{"model":"toy_table1","reps":3,"seed":4,"folds":2,"n_lambdas":10}"#).unwrap();
    let a = serde_json::to_string(&run_monte_carlo(&cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&run_monte_carlo(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn node_permutation_permutes_phi() {
    let mut r = KeyedRng::new(21);
    let phi = DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.0, 0.0, 0.4, 0.0, 0.1, 0.0, 0.3]);
    let series: Vec<DMatrix<f64>> = (0..10)
        .map(|_| {
            let mut s = DMatrix::zeros(60, 3);
            for t in 1..60 {
                let e = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut r));
                let next = &phi * s.row(t - 1).transpose() + e;
                s.set_row(t, &next.transpose());
            }
            s
        })
        .collect();
    let perm = [2usize, 0, 1];
    let permuted: Vec<DMatrix<f64>> = series.iter().map(|s| DMatrix::from_fn(60, 3, |t, j| s[(t, perm[j])])).collect();
    let cfg = MevarConfig::default();
    let a = fit_mevar(&series, &cfg).unwrap().phi_hat;
    let b = fit_mevar(&permuted, &cfg).unwrap().phi_hat;
    for j in 0..3 {
        for k in 0..3 {
            assert!(
                (b[(j, k)] - a[(perm[j], perm[k])]).abs() < 1e-6,
                "({j},{k}): {} vs {}",
                b[(j, k)],
                a[(perm[j], perm[k])]
            );
        }
    }
}
