//! Leave-one-out valuation of training observations.
//!
//! The estimator follows the classic influence-function argument: removing
//! training point `i` from an `n`-point empirical risk moves the optimum by
//! roughly `(1/n) H^-1 grad_i`, so the mean test loss moves by
//! `(1/n) grad_i . H^-1 grad_test`. One inverse-Hessian solve against the
//! mean test gradient is shared by every training point.
//!
//! `grad_i` is the gradient of `loss_i + (lambda/2)|w|^2`. Retraining on the
//! remaining `n - 1` points averages their losses over `n - 1`, which acts
//! like shrinking lambda by `1/n`; the regularizer term carries exactly that
//! first-order effect, shared by every point.
//!
//! [`exact_loo_deltas`] is the brute-force counterpart that retrains without
//! each point; [`validate_influence`] compares the two on a random sample.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetError, ObservationTable};
use crate::linalg::{axpy, conjugate_gradient, dot};
use crate::model::{
    hessian_vector_product, mean_loss, per_example_gradient, total_gradient, train, FittedModel, ModelError, ModelSpec,
};

/// Default number of sampled training points in a validation run.
pub const DEFAULT_SAMPLE_SIZE: usize = 100;

const MAX_DAMPING_ESCALATIONS: usize = 3;

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("model did not converge (gradient norm {gradient_norm:e} after {iterations} iterations)")]
    NotConverged { gradient_norm: f64, iterations: usize },
    #[error(
        "conjugate gradient stalled: relative residual {:e} after {} iterations at damping {:e}",
        .0.relative_residual, .0.iterations, .0.damping
    )]
    Solver(SolverDiagnostics),
    #[error("invalid request: {0}")]
    Invalid(String),
}

impl InfluenceError {
    /// True for optimizer and solver failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, InfluenceError::NotConverged { .. } | InfluenceError::Solver(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub cg_tolerance: f64,
    /// `None` resolves to `10 * (d + 1)`.
    pub cg_max_iterations: Option<usize>,
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            cg_tolerance: 1e-10,
            cg_max_iterations: None,
            damping: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn max_iterations_for(&self, dim: usize) -> usize {
        self.cg_max_iterations.unwrap_or(10 * dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub residual_norm: f64,
    pub relative_residual: f64,
    pub damping: f64,
    /// Damping values tried and abandoned before the final solve.
    pub escalations: Vec<f64>,
}

/// Solves `(H + damping I) s = v` by conjugate gradient on Hessian-vector
/// products.
pub fn inverse_hvp(
    model: &FittedModel,
    train: &ObservationTable,
    v: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolverDiagnostics), InfluenceError> {
    require_converged(model)?;
    if v.len() != model.theta.len() {
        return Err(ModelError::Dimension {
            expected: model.theta.len(),
            got: v.len(),
        }
        .into());
    }
    // Surface dimension errors before entering the solver closure.
    hessian_vector_product(model, train, v)?;
    let damping = cfg.damping;
    let apply = |p: &[f64]| -> Vec<f64> {
        let mut hp = hessian_vector_product(model, train, p).expect("dimensions checked");
        if damping > 0.0 {
            axpy(damping, p, &mut hp);
        }
        hp
    };
    let out = conjugate_gradient(apply, v, cfg.cg_tolerance, cfg.max_iterations_for(v.len()));
    let v_norm = crate::linalg::norm(v);
    let diagnostics = SolverDiagnostics {
        iterations: out.iterations,
        residual_norm: out.residual_norm,
        relative_residual: if v_norm > 0.0 { out.residual_norm / v_norm } else { 0.0 },
        damping,
        escalations: Vec::new(),
    };
    if !out.converged {
        return Err(InfluenceError::Solver(diagnostics));
    }
    Ok((out.solution, diagnostics))
}

fn require_converged(model: &FittedModel) -> Result<(), InfluenceError> {
    if model.converged {
        Ok(())
    } else {
        Err(InfluenceError::NotConverged {
            gradient_norm: model.final_gradient_norm,
            iterations: model.iterations,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuationMethod {
    InfluenceEstimate,
    ExactRetrain,
}

/// Signed per-observation test-loss changes. Positive means removing the
/// observation raises test loss, i.e. the observation helps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationVector {
    pub deltas: Vec<f64>,
    pub method: ValuationMethod,
    pub model_fingerprint: String,
    pub diagnostics: Option<SolverDiagnostics>,
}

impl ValuationVector {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

/// Hash of the model spec and the exact training split contents.
pub fn model_fingerprint(spec: &ModelSpec, train: &ObservationTable) -> String {
    let mut h = Sha256::new();
    h.update(spec.loss.name().as_bytes());
    h.update(spec.l2_strength.to_le_bytes());
    h.update(spec.hinge_temperature.to_le_bytes());
    h.update(spec.optimizer_tolerance.to_le_bytes());
    h.update((spec.max_iterations as u64).to_le_bytes());
    h.update((train.n_features() as u64).to_le_bytes());
    for i in 0..train.len() {
        h.update((train.row_ids()[i] as u64).to_le_bytes());
        h.update([train.labels()[i] as u8]);
        for v in train.row(i) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..16])
}

/// Influence-function estimate of every training point's LOO delta.
///
/// If the solve stalls, damping is raised (from `1e-3 * lambda` when it
/// starts at zero, then x10) up to three times; each attempt is recorded.
pub fn estimate_loo_deltas(
    model: &FittedModel,
    train: &ObservationTable,
    test: &ObservationTable,
    cfg: &SolverConfig,
) -> Result<ValuationVector, InfluenceError> {
    require_converged(model)?;
    let test_gradient = total_gradient(model, test, false)?;

    let mut attempt = *cfg;
    let mut escalations = Vec::new();
    let (s_test, mut diagnostics) = loop {
        match inverse_hvp(model, train, &test_gradient, &attempt) {
            Ok(ok) => break ok,
            Err(InfluenceError::Solver(diag)) if escalations.len() < MAX_DAMPING_ESCALATIONS => {
                escalations.push(diag.damping);
                attempt.damping = if attempt.damping > 0.0 {
                    attempt.damping * 10.0
                } else {
                    1e-3 * model.spec.l2_strength
                };
            }
            Err(InfluenceError::Solver(mut diag)) => {
                escalations.push(diag.damping);
                diag.escalations = escalations;
                return Err(InfluenceError::Solver(diag));
            }
            Err(e) => return Err(e),
        }
    };
    diagnostics.escalations = escalations;

    let d = train.n_features();
    let inv_n = 1.0 / train.len() as f64;
    let shrink = model.spec.l2_strength * dot(&model.theta[..d], &s_test[..d]);
    let deltas = (0..train.len())
        .into_par_iter()
        .map(|i| {
            let g = per_example_gradient(model, train.row(i), train.label(i))?;
            Ok(inv_n * (dot(&g, &s_test) + shrink))
        })
        .collect::<Result<Vec<f64>, ModelError>>()?;
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(InfluenceError::Invalid("non-finite influence estimate".into()));
    }

    Ok(ValuationVector {
        deltas,
        method: ValuationMethod::InfluenceEstimate,
        model_fingerprint: model_fingerprint(&model.spec, train),
        diagnostics: Some(diagnostics),
    })
}

/// Exact LOO deltas for the given training positions, retraining from
/// scratch once per position. `base` must be the model fitted on all of
/// `train` with `spec`.
pub fn exact_loo_deltas(
    spec: &ModelSpec,
    base: &FittedModel,
    train: &ObservationTable,
    test: &ObservationTable,
    indices: &[usize],
) -> Result<Vec<f64>, InfluenceError> {
    require_converged(base)?;
    let base_loss = mean_loss(spec, &base.theta, test);
    indices
        .par_iter()
        .map(|&i| {
            if i >= train.len() {
                return Err(InfluenceError::Invalid(format!(
                    "row {i} out of range for {} training rows",
                    train.len()
                )));
            }
            let reduced = train.without(i)?;
            reduced.require_both_classes("training table after removal")?;
            let refit = train_model(spec, &reduced)?;
            Ok(mean_loss(spec, &refit.theta, test) - base_loss)
        })
        .collect()
}

/// Exact LOO delta of a single training position.
pub fn exact_loo_delta(
    spec: &ModelSpec,
    train: &ObservationTable,
    test: &ObservationTable,
    i: usize,
) -> Result<f64, InfluenceError> {
    if i >= train.len() {
        return Err(InfluenceError::Invalid(format!("row {i} out of range")));
    }
    train.without(i)?.require_both_classes("training table after removal")?;
    let base = train_model(spec, train)?;
    Ok(exact_loo_deltas(spec, &base, train, test, &[i])?[0])
}

/// Trains and insists on convergence.
pub fn train_model(spec: &ModelSpec, table: &ObservationTable) -> Result<FittedModel, InfluenceError> {
    let model = train(spec, table)?;
    require_converged(&model)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    #[serde(rename = "indices")]
    pub sampled_indices: Vec<usize>,
    pub estimated: Vec<f64>,
    pub exact: Vec<f64>,
    pub pearson_r: f64,
    pub spearman_r: f64,
    pub sign_agreement: f64,
    pub solver_diagnostics: Option<SolverDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Compares influence estimates with exact retraining on `sample_size`
/// training points drawn without replacement.
pub fn validate_influence(
    spec: &ModelSpec,
    train: &ObservationTable,
    test: &ObservationTable,
    sample_size: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<ValidationReport, InfluenceError> {
    if sample_size == 0 || sample_size > train.len() {
        return Err(InfluenceError::Invalid(format!(
            "sample size {sample_size} must lie in 1..={}",
            train.len()
        )));
    }
    let model = train_model(spec, train)?;
    let valuation = estimate_loo_deltas(&model, train, test, cfg)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut indices = order[..sample_size].to_vec();
    indices.sort_unstable();

    let estimated: Vec<f64> = indices.iter().map(|&i| valuation.deltas[i]).collect();
    let exact = exact_loo_deltas(spec, &model, train, test, &indices)?;
    Ok(ValidationReport {
        pearson_r: pearson(&estimated, &exact),
        spearman_r: spearman(&estimated, &exact),
        sign_agreement: sign_agreement(&estimated, &exact),
        sampled_indices: indices,
        estimated,
        exact,
        solver_diagnostics: valuation.diagnostics,
        note: None,
    })
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson: length mismatch");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Ranks starting at 1; ties share their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Fraction of pairs whose signs agree (`signum` equality, zero matches zero).
pub fn sign_agreement(estimated: &[f64], exact: &[f64]) -> f64 {
    if estimated.is_empty() {
        return 1.0;
    }
    let same = estimated
        .iter()
        .zip(exact)
        .filter(|(e, x)| sign(**e) == sign(**x))
        .count();
    same as f64 / estimated.len() as f64
}

/// Sign agreement restricted to points whose exact `|delta|` is strictly
/// above the median exact `|delta|`.
pub fn sign_agreement_above_median(estimated: &[f64], exact: &[f64]) -> f64 {
    let mut magnitudes: Vec<f64> = exact.iter().map(|x| x.abs()).collect();
    magnitudes.sort_by(f64::total_cmp);
    let median = crate::metrics::median_of_sorted(&magnitudes).unwrap_or(0.0);
    let (est, ex): (Vec<f64>, Vec<f64>) = estimated
        .iter()
        .zip(exact)
        .filter(|(_, x)| x.abs() > median)
        .map(|(e, x)| (*e, *x))
        .unzip();
    sign_agreement(&est, &ex)
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}
