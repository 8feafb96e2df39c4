//! Damped least squares (Levenberg-Marquardt with Marquardt diagonal scaling).
//!
//! Box constraints are handled by the MINUIT variable transforms, so the
//! solver itself runs unconstrained on internal coordinates.

use nalgebra::{DMatrix, DVector};

/// Optional lower/upper limits for one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParamBound {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl ParamBound {
    pub const FREE: ParamBound = ParamBound { lo: None, hi: None };

    pub fn lower(lo: f64) -> Self {
        Self { lo: Some(lo), hi: None }
    }

    pub fn range(lo: f64, hi: f64) -> Self {
        Self {
            lo: Some(lo),
            hi: Some(hi),
        }
    }

    fn to_external(self, q: f64) -> (f64, f64) {
        match (self.lo, self.hi) {
            (None, None) => (q, 1.0),
            (Some(lo), None) => {
                let r = (q * q + 1.0).sqrt();
                (lo - 1.0 + r, q / r)
            }
            (None, Some(hi)) => {
                let r = (q * q + 1.0).sqrt();
                (hi + 1.0 - r, -q / r)
            }
            (Some(lo), Some(hi)) => {
                let (s, c) = q.sin_cos();
                (lo + 0.5 * (hi - lo) * (s + 1.0), 0.5 * (hi - lo) * c)
            }
        }
    }

    fn to_internal(self, p: f64) -> f64 {
        match (self.lo, self.hi) {
            (None, None) => p,
            (Some(lo), None) => {
                let p = p.max(lo + 1e-6 * (1.0 + lo.abs()));
                ((p - lo + 1.0).powi(2) - 1.0).sqrt()
            }
            (None, Some(hi)) => {
                let p = p.min(hi - 1e-6 * (1.0 + hi.abs()));
                ((hi - p + 1.0).powi(2) - 1.0).sqrt()
            }
            (Some(lo), Some(hi)) => {
                let u = (2.0 * (p - lo) / (hi - lo) - 1.0).clamp(-1.0 + 1e-9, 1.0 - 1e-9);
                u.asin()
            }
        }
    }

    pub fn contains(self, p: f64) -> bool {
        self.lo.is_none_or(|lo| p >= lo) && self.hi.is_none_or(|hi| p <= hi)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-10,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    /// External (bounded) parameters.
    pub params: Vec<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    /// Jacobian of the residuals w.r.t. the external parameters at `params`.
    pub jacobian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Residual callback: fills `r` (and `j`, w.r.t. external parameters, when
/// given) and returns false if anything is non-finite.
pub trait Residuals {
    fn n_residuals(&self) -> usize;
    fn eval(&self, p: &[f64], r: &mut DVector<f64>, j: Option<&mut DMatrix<f64>>) -> bool;
}

struct State {
    q: DVector<f64>,
    p: Vec<f64>,
    dpdq: Vec<f64>,
}

fn state(q: DVector<f64>, bounds: &[ParamBound]) -> State {
    let (p, dpdq) = q
        .iter()
        .zip(bounds)
        .map(|(&qi, b)| b.to_external(qi))
        .unzip();
    State { q, p, dpdq }
}

pub fn minimize(problem: &impl Residuals, x0: &[f64], bounds: &[ParamBound], opts: &LmOptions) -> Option<LmOutcome> {
    let n = x0.len();
    assert_eq!(bounds.len(), n);
    let m = problem.n_residuals();
    let mut r = DVector::zeros(m);
    let mut jac = DMatrix::zeros(m, n);

    let q0 = DVector::from_iterator(n, x0.iter().zip(bounds).map(|(&p, b)| b.to_internal(p)));
    let mut cur = state(q0, bounds);
    if !problem.eval(&cur.p, &mut r, Some(&mut jac)) {
        return None;
    }
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut r_trial = DVector::zeros(m);

    while iterations < opts.max_iterations {
        iterations += 1;
        let mut jq = jac.clone();
        for (mut col, &d) in jq.column_iter_mut().zip(&cur.dpdq) {
            col *= d;
        }
        let grad = jq.tr_mul(&r);
        let jtj = jq.tr_mul(&jq);

        // scaled gradient: cosine between r and each Jacobian column
        let rnorm = cost.sqrt();
        let gmax = (0..n)
            .map(|k| {
                let cn = jtj[(k, k)].sqrt();
                if cn > 0.0 && rnorm > 0.0 { grad[k].abs() / (cn * rnorm) } else { 0.0 }
            })
            .fold(0.0, f64::max);
        if gmax <= opts.gradient_tolerance || cost == 0.0 {
            converged = true;
            break;
        }

        // floor keeps the damped system positive definite when a column vanishes
        let dmax = (0..n).map(|k| jtj[(k, k)]).fold(0.0, f64::max);
        let diag: Vec<f64> = (0..n).map(|k| jtj[(k, k)].max(1e-12 * dmax).max(1e-300)).collect();
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for (k, &d) in diag.iter().enumerate() {
                a[(k, k)] += lambda * d;
            }
            let Some(chol) = a.cholesky() else {
                lambda *= nu;
                nu *= 2.0;
                continue;
            };
            let delta = chol.solve(&(-&grad));
            let trial = state(&cur.q + &delta, bounds);
            let ok = problem.eval(&trial.p, &mut r_trial, None);
            let trial_cost = r_trial.norm_squared();
            // reduction predicted by the linearised model
            let predicted = -(2.0 * grad.dot(&delta) + delta.dot(&(&jtj * &delta)));
            if ok && trial_cost.is_finite() && trial_cost < cost && predicted > 0.0 {
                let reduction = cost - trial_cost;
                let rho = reduction / predicted;
                let step_small = delta.norm() <= opts.step_tolerance * (cur.q.norm() + opts.step_tolerance);
                let tol = opts.cost_tolerance * cost;
                if (reduction <= tol && predicted <= tol) || step_small {
                    converged = true;
                }
                cur = trial;
                cost = trial_cost;
                // Nielsen's damping update
                lambda = (lambda * (1.0 / 3.0f64).max(1.0 - (2.0 * rho - 1.0).powi(3))).max(1e-15);
                nu = 2.0;
                if !problem.eval(&cur.p, &mut r, Some(&mut jac)) {
                    return None;
                }
                accepted = true;
                break;
            }
            lambda *= nu;
            nu *= 2.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // no descent direction left at working precision
            converged = true;
            break;
        }
    }

    Some(LmOutcome {
        params: cur.p,
        cost,
        jacobian: jac,
        iterations,
        converged,
    })
}
