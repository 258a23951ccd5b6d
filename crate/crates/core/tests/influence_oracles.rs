mod common;

use data_dividends::influence::{exact_loo_deltas, train_model};
use data_dividends::model::score;
use data_dividends::{estimate_loo_deltas, inverse_hvp, ModelSpec, ObservationTable, SolverConfig};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{logistic_table, normal, one_to_one_ids, pearson, sign_agreement_above_median};

/// Explicit Hessian of the regularized objective; the intercept is unpenalized.
fn dense_hessian(spec: &ModelSpec, theta: &[f64], table: &ObservationTable) -> DMatrix<f64> {
    let d = table.n_features();
    let n = table.len() as f64;
    let mut h = DMatrix::zeros(d + 1, d + 1);
    for i in 0..table.len() {
        let mut x = table.row(i).to_vec();
        x.push(1.0);
        let x = DVector::from_vec(x);
        let c = spec.d2loss(score(theta, table.row(i)), table.label(i)) / n;
        h += c * &x * x.transpose();
    }
    for j in 0..d {
        h[(j, j)] += spec.l2_strength;
    }
    h
}

#[test]
fn inverse_hvp_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (k, d) in (1..=5).cycle().take(10).enumerate() {
        let spec = if k % 2 == 0 {
            ModelSpec::logistic(0.05)
        } else {
            ModelSpec::smooth_hinge(0.05, 0.3)
        };
        let table = logistic_table(&mut rng, 80, d, 0.1, one_to_one_ids(80));
        let model = train_model(&spec, &table).unwrap();
        let v: Vec<f64> = (0..=d).map(|_| normal(&mut rng)).collect();
        let (s, _) = inverse_hvp(&model, &table, &v, &SolverConfig::default()).unwrap();

        let h = dense_hessian(&spec, &model.theta, &table);
        let oracle = h.cholesky().expect("positive definite").solve(&DVector::from_vec(v));
        let err = (DVector::from_vec(s) - &oracle).norm() / oracle.norm();
        assert!(err < 1e-8, "relative error {err:e} at d = {d}");
    }
}

#[test]
fn permuting_rows_permutes_deltas() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let train = logistic_table(&mut rng, 120, 4, 0.1, one_to_one_ids(120));
    let test = logistic_table(&mut rng, 60, 4, 0.1, one_to_one_ids(60));
    let spec = ModelSpec::logistic(0.05);
    let cfg = SolverConfig::default();
    let base = estimate_loo_deltas(&train_model(&spec, &train).unwrap(), &train, &test, &cfg)
        .unwrap()
        .deltas;

    let mut perm: Vec<usize> = (0..train.len()).collect();
    perm.shuffle(&mut rng);
    let shuffled = train.select(&perm).unwrap();
    let moved = estimate_loo_deltas(&train_model(&spec, &shuffled).unwrap(), &shuffled, &test, &cfg)
        .unwrap()
        .deltas;
    let scale = base.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (k, &p) in perm.iter().enumerate() {
        assert!(
            (moved[k] - base[p]).abs() <= 1e-9 * scale,
            "row {p}: {} vs {}",
            moved[k],
            base[p]
        );
    }
}

#[test]
fn deltas_are_identical_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let train = logistic_table(&mut rng, 1500, 6, 0.1, one_to_one_ids(1500));
    let test = logistic_table(&mut rng, 400, 6, 0.1, one_to_one_ids(400));
    let spec = ModelSpec::logistic(0.01);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let model = train_model(&spec, &train).unwrap();
            estimate_loo_deltas(&model, &train, &test, &SolverConfig::default()).unwrap()
        })
    };
    let one = run(1);
    for threads in [2, 3, 8] {
        assert_eq!(one, run(threads), "{threads} threads");
    }
}

#[test]
fn full_sweep_agrees_in_sign_above_the_median() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let train = logistic_table(&mut rng, 150, 5, 0.1, one_to_one_ids(150));
    let test = logistic_table(&mut rng, 100, 5, 0.1, one_to_one_ids(100));
    let spec = ModelSpec::logistic(0.2);
    let model = train_model(&spec, &train).unwrap();
    let estimated = estimate_loo_deltas(&model, &train, &test, &SolverConfig::default())
        .unwrap()
        .deltas;
    let all: Vec<usize> = (0..train.len()).collect();
    let exact = exact_loo_deltas(&spec, &model, &train, &test, &all).unwrap();
    assert!(pearson(&estimated, &exact) >= 0.99);
    assert!(sign_agreement_above_median(&estimated, &exact) >= 0.95);
}
