//! L2-regularized convex binary classifiers.
//!
//! Parameters are laid out as `[w_1, .., w_d, b]`: `d` feature weights
//! followed by an unregularized intercept. The training objective is
//!
//! ```text
//! (1/n) * sum_i loss(y_i * (w.x_i + b)) + (lambda/2) * |w|^2
//! ```
//!
//! Sums over rows are reduced in fixed-size chunks whose partial results are
//! combined in chunk order, so every quantity here is bitwise reproducible
//! regardless of the rayon pool size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ObservationTable;
use crate::linalg::{axpy, conjugate_gradient, dot, norm};

const CHUNK_ROWS: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("training data invalid: {0}")]
    Data(#[from] crate::dataset::DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Logistic,
    SmoothHinge,
}

impl LossFamily {
    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Logistic => "logistic",
            LossFamily::SmoothHinge => "smooth_hinge",
        }
    }
}

impl std::str::FromStr for LossFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logistic" | "lr" => Ok(LossFamily::Logistic),
            "smooth_hinge" | "svm" => Ok(LossFamily::SmoothHinge),
            other => Err(format!("unknown loss family `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub loss: LossFamily,
    pub l2_strength: f64,
    /// Smoothing temperature of the hinge; ignored by the logistic loss.
    pub hinge_temperature: f64,
    /// Gradient-norm stopping criterion.
    pub optimizer_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            loss: LossFamily::Logistic,
            l2_strength: 1e-3,
            hinge_temperature: 0.1,
            optimizer_tolerance: 1e-8,
            max_iterations: 10_000,
        }
    }
}

impl ModelSpec {
    pub fn logistic(l2_strength: f64) -> Self {
        ModelSpec {
            l2_strength,
            ..Default::default()
        }
    }

    pub fn smooth_hinge(l2_strength: f64, hinge_temperature: f64) -> Self {
        ModelSpec {
            loss: LossFamily::SmoothHinge,
            l2_strength,
            hinge_temperature,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.l2_strength > 0.0 && self.l2_strength.is_finite()) {
            return Err(ModelError::Spec(format!(
                "l2 strength must be positive, got {}",
                self.l2_strength
            )));
        }
        if !(self.hinge_temperature > 0.0 && self.hinge_temperature.is_finite()) {
            return Err(ModelError::Spec(format!(
                "hinge temperature must be positive, got {}",
                self.hinge_temperature
            )));
        }
        if self.optimizer_tolerance.is_nan() || self.optimizer_tolerance <= 0.0 || self.max_iterations == 0 {
            return Err(ModelError::Spec(
                "optimizer tolerance and max iterations must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Loss of one example as a function of its score `s`.
    pub fn loss(&self, score: f64, y: f64) -> f64 {
        let margin = y * score;
        match self.loss {
            LossFamily::Logistic => softplus(-margin),
            LossFamily::SmoothHinge => {
                let t = self.hinge_temperature;
                t * softplus((1.0 - margin) / t)
            }
        }
    }

    /// First derivative of the loss with respect to the score.
    pub fn dloss(&self, score: f64, y: f64) -> f64 {
        let margin = y * score;
        match self.loss {
            LossFamily::Logistic => -y * sigmoid(-margin),
            LossFamily::SmoothHinge => -y * sigmoid((1.0 - margin) / self.hinge_temperature),
        }
    }

    /// Second derivative of the loss with respect to the score.
    pub fn d2loss(&self, score: f64, y: f64) -> f64 {
        let margin = y * score;
        match self.loss {
            LossFamily::Logistic => sigmoid_slope(margin),
            LossFamily::SmoothHinge => {
                let t = self.hinge_temperature;
                sigmoid_slope((1.0 - margin) / t) / t
            }
        }
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 36.0 {
        z
    } else if z < -36.0 {
        z.exp()
    } else {
        z.max(0.0) + (-z.abs()).exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(z) * (1 - sigmoid(z))`
fn sigmoid_slope(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Score `w.x + b` for parameters laid out as `[w; b]`.
pub fn score(theta: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    dot(&theta[..d], x) + theta[d]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub theta: Vec<f64>,
    pub spec: ModelSpec,
    pub final_gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FittedModel {
    /// Wraps an arbitrary parameter vector, e.g. for derivative checks.
    pub fn from_theta(spec: ModelSpec, theta: Vec<f64>) -> Self {
        FittedModel {
            theta,
            spec,
            final_gradient_norm: f64::NAN,
            converged: false,
            iterations: 0,
        }
    }

    pub fn n_features(&self) -> usize {
        self.theta.len() - 1
    }

    fn check_dim(&self, d: usize) -> Result<(), ModelError> {
        if d + 1 != self.theta.len() {
            return Err(ModelError::Dimension {
                expected: self.theta.len() - 1,
                got: d,
            });
        }
        Ok(())
    }
}

pub fn per_example_loss(model: &FittedModel, x: &[f64], y: f64) -> Result<f64, ModelError> {
    model.check_dim(x.len())?;
    Ok(model.spec.loss(score(&model.theta, x), y))
}

/// Gradient of one example's loss with respect to `[w; b]`, no regularizer.
pub fn per_example_gradient(model: &FittedModel, x: &[f64], y: f64) -> Result<Vec<f64>, ModelError> {
    model.check_dim(x.len())?;
    let g = model.spec.dloss(score(&model.theta, x), y);
    let mut out: Vec<f64> = x.iter().map(|xi| g * xi).collect();
    out.push(g);
    Ok(out)
}

/// Sums `term(i)` (each of length `dim`) over all rows in fixed-order chunks.
fn chunked_row_sum<F>(n: usize, dim: usize, term: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK_ROWS);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; dim];
            for i in c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n) {
                term(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; dim];
    for p in &partials {
        axpy(1.0, p, &mut total);
    }
    total
}

/// Mean loss over the table, without the regularizer.
pub fn mean_loss(spec: &ModelSpec, theta: &[f64], table: &ObservationTable) -> f64 {
    let total = chunked_row_sum(table.len(), 1, |i, acc| {
        acc[0] += spec.loss(score(theta, table.row(i)), table.label(i));
    });
    total[0] / table.len() as f64
}

/// Regularized training objective.
pub fn objective(spec: &ModelSpec, theta: &[f64], table: &ObservationTable) -> f64 {
    let d = table.n_features();
    mean_loss(spec, theta, table) + 0.5 * spec.l2_strength * dot(&theta[..d], &theta[..d])
}

fn gradient_at(spec: &ModelSpec, theta: &[f64], table: &ObservationTable, include_regularizer: bool) -> Vec<f64> {
    let d = table.n_features();
    let mut g = chunked_row_sum(table.len(), d + 1, |i, acc| {
        let x = table.row(i);
        let s = spec.dloss(score(theta, x), table.label(i));
        axpy(s, x, &mut acc[..d]);
        acc[d] += s;
    });
    let inv_n = 1.0 / table.len() as f64;
    g.iter_mut().for_each(|v| *v *= inv_n);
    if include_regularizer {
        axpy(spec.l2_strength, &theta[..d], &mut g[..d]);
    }
    g
}

fn hvp_at(spec: &ModelSpec, theta: &[f64], table: &ObservationTable, v: &[f64]) -> Vec<f64> {
    let d = table.n_features();
    let mut hv = chunked_row_sum(table.len(), d + 1, |i, acc| {
        let x = table.row(i);
        let curvature = spec.d2loss(score(theta, x), table.label(i));
        let c = curvature * (dot(x, &v[..d]) + v[d]);
        axpy(c, x, &mut acc[..d]);
        acc[d] += c;
    });
    let inv_n = 1.0 / table.len() as f64;
    hv.iter_mut().for_each(|h| *h *= inv_n);
    axpy(spec.l2_strength, &v[..d], &mut hv[..d]);
    hv
}

/// Mean per-example gradient over `table`, plus `lambda * w` when requested.
pub fn total_gradient(
    model: &FittedModel,
    table: &ObservationTable,
    include_regularizer: bool,
) -> Result<Vec<f64>, ModelError> {
    model.check_dim(table.n_features())?;
    Ok(gradient_at(&model.spec, &model.theta, table, include_regularizer))
}

/// Product of the regularized training Hessian with `v`, without forming it.
pub fn hessian_vector_product(
    model: &FittedModel,
    train: &ObservationTable,
    v: &[f64],
) -> Result<Vec<f64>, ModelError> {
    model.check_dim(train.n_features())?;
    if v.len() != model.theta.len() {
        return Err(ModelError::Dimension {
            expected: model.theta.len(),
            got: v.len(),
        });
    }
    Ok(hvp_at(&model.spec, &model.theta, train, v))
}

/// Minimizes the regularized objective by line-searched Newton-CG from zero.
///
/// Failing to reach the tolerance is not an error: the result carries
/// `converged = false` and the final gradient norm.
pub fn train(spec: &ModelSpec, table: &ObservationTable) -> Result<FittedModel, ModelError> {
    spec.validate()?;
    table.require_both_classes("training table")?;
    let dim = table.n_features() + 1;
    let mut theta = vec![0.0; dim];
    let mut f = objective(spec, &theta, table);
    let mut g = gradient_at(spec, &theta, table, true);
    let mut g_norm = norm(&g);
    let mut iterations = 0;

    while g_norm > spec.optimizer_tolerance && iterations < spec.max_iterations {
        iterations += 1;
        let forcing = g_norm.sqrt().min(0.1);
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let step = conjugate_gradient(|v| hvp_at(spec, &theta, table, v), &neg_g, forcing, 2 * dim + 10).solution;
        let slope = dot(&g, &step);
        let direction = if slope < 0.0 { step } else { neg_g };
        let slope = dot(&g, &direction);

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut candidate = theta.clone();
            axpy(alpha, &direction, &mut candidate);
            let f_new = objective(spec, &candidate, table);
            if f_new <= f + 1e-4 * alpha * slope {
                accepted = Some((candidate, f_new, None));
                break;
            }
            if alpha == 1.0 {
                // Near the optimum the objective stops resolving the decrease;
                // fall back to the gradient norm for the full Newton step.
                let g_new = gradient_at(spec, &candidate, table, true);
                if f_new <= f + 1e-12 * f.abs() && norm(&g_new) < 0.5 * g_norm {
                    accepted = Some((candidate, f_new, Some(g_new)));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((candidate, f_new, g_new)) = accepted else {
            break;
        };
        theta = candidate;
        f = f_new;
        g = g_new.unwrap_or_else(|| gradient_at(spec, &theta, table, true));
        g_norm = norm(&g);
    }

    Ok(FittedModel {
        theta,
        spec: *spec,
        final_gradient_norm: g_norm,
        converged: g_norm <= spec.optimizer_tolerance,
        iterations,
    })
}
