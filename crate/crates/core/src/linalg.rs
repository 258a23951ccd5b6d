//! Small dense-vector helpers and a matrix-free conjugate gradient.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// True residual `||A x - b||`, recomputed from the operator.
    pub residual_norm: f64,
    pub converged: bool,
}

/// Solves `A x = b` for symmetric positive definite `A` given only `x -> A x`.
///
/// Stops when the true residual satisfies `||A x - b|| <= rel_tol * ||b||`.
/// When the recursive residual claims convergence but the true one has
/// drifted, the iteration restarts from the current iterate.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], rel_tol: f64, max_iter: usize) -> CgOutcome
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let dim = b.len();
    let b_norm = norm(b);
    let mut x = vec![0.0; dim];
    if b_norm == 0.0 {
        return CgOutcome {
            solution: x,
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
        };
    }
    let target = rel_tol * b_norm;
    let mut iterations = 0;
    let mut r = b.to_vec();

    loop {
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        while iterations < max_iter && rr.sqrt() > target {
            let ap = apply(&p);
            let pap = dot(&p, &ap);
            if pap <= 0.0 || !pap.is_finite() {
                break;
            }
            let alpha = rr / pap;
            axpy(alpha, &p, &mut x);
            axpy(-alpha, &ap, &mut r);
            let rr_next = dot(&r, &r);
            let beta = rr_next / rr;
            rr = rr_next;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta * *pi;
            }
            iterations += 1;
        }

        let ax = apply(&x);
        r = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
        let residual_norm = norm(&r);
        let converged = residual_norm <= target;
        if converged || iterations >= max_iter || rr.sqrt() > target {
            return CgOutcome {
                solution: x,
                iterations,
                residual_norm,
                converged,
            };
        }
    }
}
