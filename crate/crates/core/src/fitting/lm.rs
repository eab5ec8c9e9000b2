//! Projected Levenberg-Marquardt for small dense least-squares problems.

use nalgebra::{DMatrix, DVector};

/// A model `y(x; p)` with box constraints applied by projection.
pub(crate) trait Model {
    fn n_params(&self) -> usize;
    /// Model value at `x`; writes `dy/dp` into `grad`.
    fn eval(&self, p: &[f64], x: f64, grad: &mut [f64]) -> f64;
    /// Inclusive `(lower, upper)` bound of each parameter.
    fn bounds(&self) -> Vec<(f64, f64)>;
}

fn project(bounds: &[(f64, f64)], p: &mut [f64]) {
    for (v, (lo, hi)) in p.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmSettings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct LmOutcome {
    pub params: Vec<f64>,
    /// Half the residual sum of squares.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the seed.
    #[cfg_attr(not(test), allow(dead_code))]
    pub cost_history: Vec<f64>,
}

/// Residuals `model - y` and the Jacobian at `p`.
pub(crate) fn linearize<M: Model>(
    m: &M,
    p: &[f64],
    x: &[f64],
    y: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let k = m.n_params();
    let mut r = DVector::zeros(n);
    let mut jac = DMatrix::zeros(n, k);
    let mut grad = vec![0.0; k];
    for i in 0..n {
        r[i] = m.eval(p, x[i], &mut grad) - y[i];
        for (j, g) in grad.iter().enumerate() {
            jac[(i, j)] = *g;
        }
    }
    (r, jac)
}

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e16;

/// Minimize half the residual sum of squares within the parameter box.
///
/// Parameters sitting on a bound with the gradient pushing outward are frozen
/// for the step, so the remaining ones get an unclipped Gauss-Newton update.
pub(crate) fn levenberg_marquardt<M: Model>(
    m: &M,
    x: &[f64],
    y: &[f64],
    seed: &[f64],
    s: &LmSettings,
) -> LmOutcome {
    let k = m.n_params();
    let bounds = m.bounds();
    let mut p = seed.to_vec();
    project(&bounds, &mut p);
    let (mut r, mut jac) = linearize(m, &p, x, y);
    let mut cost = 0.5 * r.norm_squared();
    let mut history = vec![cost];
    let mut lambda = LAMBDA_INIT;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < s.max_iterations {
        iterations += 1;
        let jtj = jac.tr_mul(&jac);
        let g = jac.tr_mul(&r);
        let active: Vec<bool> = (0..k)
            .map(|j| (p[j] <= bounds[j].0 && g[j] > 0.0) || (p[j] >= bounds[j].1 && g[j] < 0.0))
            .collect();
        let rnorm = r.norm();
        // Scaled gradient: cosine between the residual and each free Jacobian column.
        let gmax = (0..k)
            .filter(|&j| !active[j])
            .map(|j| {
                let col = jtj[(j, j)].sqrt();
                if col > 0.0 && rnorm > 0.0 {
                    g[j].abs() / (col * rnorm)
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        if gmax <= s.gradient_tolerance || cost == 0.0 {
            converged = true;
            break;
        }

        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut a = jtj.clone();
            let mut rhs = -&g;
            for j in 0..k {
                if active[j] {
                    a.row_mut(j).fill(0.0);
                    a.column_mut(j).fill(0.0);
                    a[(j, j)] = 1.0;
                    rhs[j] = 0.0;
                } else {
                    a[(j, j)] += lambda * jtj[(j, j)].max(1e-12);
                }
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&rhs);
            let mut trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            project(&bounds, &mut trial);
            let (rt, jt) = linearize(m, &trial, x, y);
            let ct = 0.5 * rt.norm_squared();
            if ct < cost {
                let small_step = p
                    .iter()
                    .zip(&trial)
                    .all(|(a, b)| (a - b).abs() <= s.step_tolerance * (a.abs() + s.step_tolerance));
                let small_gain = cost - ct <= f64::EPSILON * cost;
                p = trial;
                r = rt;
                jac = jt;
                cost = ct;
                history.push(cost);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                converged = small_step || small_gain;
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No descent at any damping: stationary to rounding under the constraints.
            converged = true;
        }
        if converged {
            break;
        }
    }

    LmOutcome {
        params: p,
        cost,
        iterations,
        converged,
        cost_history: history,
    }
}
