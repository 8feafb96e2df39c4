//! Biexponential IRF-reconvolution fitting.
//!
//! The decay model is
//!
//! ```text
//! PL(t) = A·E(t − t0; τ1, s) + B·E(t − t0; τ2, s) + C
//! ```
//!
//! where `E` is a unit exponential convolved with a Gaussian IRF of width `s`
//! (see [`crate::special::exp_gauss`]). The IRF is calibrated separately and
//! held fixed while the five decay parameters are fitted.

// negated comparisons below deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod irf;
pub mod lm;

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub use irf::{calibrate_irf, IrfCalibration};
pub use lm::ParamBound;

use crate::error::{Error, Result};
use crate::model::{BiexpFitResult, DecayHistogram, IrfModel};
use crate::special::exp_gauss_dtau;
use lm::{LmOptions, Residuals};

/// Minimum τ1/τ2 for the two components to count as distinct.
pub const MIN_LIFETIME_RATIO: f64 = 1.5;
/// Largest accepted condition number of the (correlation-scaled) covariance.
pub const MAX_CONDITION_NUMBER: f64 = 1e12;
/// Minimum number of non-empty bins inside the fit window.
pub const MIN_NONZERO_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Weights `1 / max(counts, 1)`.
    Poisson,
    Uniform,
}

/// The five decay parameters `{A, B, τ1, τ2, C}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiexpParams {
    pub a: f64,
    pub b: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub c: f64,
}

impl BiexpParams {
    pub fn to_array(self) -> [f64; 5] {
        [self.a, self.b, self.tau1, self.tau2, self.c]
    }

    pub fn from_array(p: [f64; 5]) -> Self {
        Self {
            a: p[0],
            b: p[1],
            tau1: p[2],
            tau2: p[3],
            c: p[4],
        }
    }
}

impl From<&BiexpFitResult> for BiexpParams {
    fn from(r: &BiexpFitResult) -> Self {
        Self {
            a: r.a_long,
            b: r.a_short,
            tau1: r.tau1,
            tau2: r.tau2,
            c: r.c_offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Bounds for `[A, B, τ1, τ2, C]`.
    pub parameter_bounds: [ParamBound; 5],
    pub initial_guess: Option<BiexpParams>,
    pub weighting: Weighting,
    /// Fit window start; `None` means `t0 − 3s`.
    pub window_start: Option<f64>,
    /// Fit window end; `None` means the end of the histogram.
    pub window_end: Option<f64>,
    /// Retry from a few perturbed starting points when no guess is given.
    pub multi_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-10,
            parameter_bounds: [
                ParamBound::lower(0.0),
                ParamBound::lower(0.0),
                ParamBound::lower(0.01),
                ParamBound::lower(0.01),
                ParamBound::FREE,
            ],
            initial_guess: None,
            weighting: Weighting::Poisson,
            window_start: None,
            window_end: None,
            multi_start: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be > 0"));
        }
        if !(self.gradient_tolerance.is_finite() && self.gradient_tolerance > 0.0) {
            return Err(Error::invalid("gradient_tolerance", "must be finite and > 0"));
        }
        for (i, b) in self.parameter_bounds.iter().enumerate() {
            for v in [b.lo, b.hi].into_iter().flatten() {
                if !v.is_finite() {
                    return Err(Error::invalid("parameter_bounds", format!("bound {i} is not finite")));
                }
            }
            if let (Some(lo), Some(hi)) = (b.lo, b.hi) {
                if lo >= hi {
                    return Err(Error::invalid("parameter_bounds", format!("bound {i}: lo >= hi")));
                }
            }
        }
        for i in [2, 3] {
            if !self.parameter_bounds[i].lo.is_some_and(|lo| lo > 0.0) {
                return Err(Error::invalid("parameter_bounds", "lifetime bounds must be strictly positive"));
            }
        }
        Ok(())
    }

    fn lm_options(&self) -> LmOptions {
        LmOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            ..LmOptions::default()
        }
    }
}

/// Model value `A·E(τ1) + B·E(τ2) + C` at time `t`.
pub fn model_eval(p: &BiexpParams, irf: &IrfModel, t: f64) -> Result<f64> {
    if !(p.tau1 > 0.0 && p.tau2 > 0.0) {
        return Err(Error::invalid("tau", "lifetimes must be > 0"));
    }
    if !(irf.s > 0.0) {
        return Err(Error::invalid("irf.s", "must be > 0"));
    }
    let (v, _) = model_value_gradient(&p.to_array(), irf, t);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid("model", format!("non-finite value at t = {t}")))
    }
}

/// Analytic gradient of [`model_eval`] with respect to `[A, B, τ1, τ2, C]`.
pub fn model_gradient(p: &BiexpParams, irf: &IrfModel, t: f64) -> [f64; 5] {
    model_value_gradient(&p.to_array(), irf, t).1
}

fn model_value_gradient(p: &[f64; 5], irf: &IrfModel, t: f64) -> (f64, [f64; 5]) {
    let x = t - irf.t0;
    let (e1, d1) = exp_gauss_dtau(x, p[2], irf.s);
    let (e2, d2) = exp_gauss_dtau(x, p[3], irf.s);
    (
        p[0] * e1 + p[1] * e2 + p[4],
        [e1, e2, p[0] * d1, p[1] * d2, 1.0],
    )
}

/// Binned decay data on a uniform grid; counts may be fractional (expectations).
#[derive(Debug, Clone)]
pub struct Binned<'a> {
    pub t_start: f64,
    pub bin_width: f64,
    pub values: Cow<'a, [f64]>,
}

impl<'a> Binned<'a> {
    pub fn new(t_start: f64, bin_width: f64, values: impl Into<Cow<'a, [f64]>>) -> Self {
        Self {
            t_start,
            bin_width,
            values: values.into(),
        }
    }

    pub fn center(&self, i: usize) -> f64 {
        self.t_start + (i as f64 + 0.5) * self.bin_width
    }
}

impl From<&DecayHistogram> for Binned<'static> {
    fn from(h: &DecayHistogram) -> Self {
        Binned::new(h.t_start(), h.bin_width(), h.counts_f64())
    }
}

/// Sum of `n` reconvolved exponentials plus a constant, parameters
/// `[a_1..a_n, τ_1..τ_n, C]`.
struct ReconvProblem {
    t: Vec<f64>,
    y: Vec<f64>,
    sqrt_w: Vec<f64>,
    irf: IrfModel,
    components: usize,
}

impl ReconvProblem {
    fn new(data: &Binned<'_>, irf: &IrfModel, cfg: &FitConfig, components: usize) -> Result<Self> {
        let start = cfg.window_start.unwrap_or(irf.t0 - 3.0 * irf.s);
        let end = cfg.window_end.unwrap_or(f64::INFINITY);
        let (mut t, mut y, mut sqrt_w) = (Vec::new(), Vec::new(), Vec::new());
        for (i, &v) in data.values.iter().enumerate() {
            let tc = data.center(i);
            if tc >= start && tc <= end {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::invalid("counts", format!("bin {i} is not a finite non-negative count")));
                }
                t.push(tc);
                y.push(v);
                sqrt_w.push(match cfg.weighting {
                    Weighting::Poisson => 1.0 / v.max(1.0).sqrt(),
                    Weighting::Uniform => 1.0,
                });
            }
        }
        let nonzero = y.iter().filter(|&&v| v > 0.0).count();
        if nonzero < MIN_NONZERO_BINS {
            return Err(Error::FitFailed(format!(
                "fit window holds {nonzero} non-empty bins, need at least {MIN_NONZERO_BINS}"
            )));
        }
        Ok(Self {
            t,
            y,
            sqrt_w,
            irf: *irf,
            components,
        })
    }

    fn n_params(&self) -> usize {
        2 * self.components + 1
    }
}

impl Residuals for ReconvProblem {
    fn n_residuals(&self) -> usize {
        self.t.len()
    }

    fn eval(&self, p: &[f64], r: &mut DVector<f64>, mut j: Option<&mut DMatrix<f64>>) -> bool {
        let n = self.components;
        for i in 0..self.t.len() {
            let x = self.t[i] - self.irf.t0;
            let mut v = p[2 * n];
            for k in 0..n {
                let (e, de) = exp_gauss_dtau(x, p[n + k], self.irf.s);
                v += p[k] * e;
                if let Some(j) = j.as_deref_mut() {
                    j[(i, k)] = self.sqrt_w[i] * e;
                    j[(i, n + k)] = self.sqrt_w[i] * p[k] * de;
                }
            }
            if let Some(j) = j.as_deref_mut() {
                j[(i, 2 * n)] = self.sqrt_w[i];
            }
            r[i] = self.sqrt_w[i] * (v - self.y[i]);
            if !r[i].is_finite() {
                return false;
            }
        }
        true
    }
}

/// Weighted log-linear slope fit of `ln(y)` against `t`; returns the lifetime.
fn log_linear_lifetime(t: &[f64], y: &[f64]) -> Option<f64> {
    let (mut sw, mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&t, &y) in t.iter().zip(y) {
        if y <= 0.0 {
            continue;
        }
        let (w, ly) = (y, y.ln());
        sw += w;
        st += w * t;
        sy += w * ly;
        stt += w * t * t;
        sty += w * t * ly;
    }
    let den = sw * stt - st * st;
    if sw <= 0.0 || den <= 0.0 {
        return None;
    }
    let slope = (sw * sty - st * sy) / den;
    (slope < 0.0).then(|| -1.0 / slope)
}

/// Heuristic starting point: background from the pre-rise bins, lifetimes
/// from log-linear fits to the early and late thirds of the post-peak decay,
/// amplitudes from the peak split evenly.
fn initial_guess(problem: &ReconvProblem) -> BiexpParams {
    let (t, y) = (&problem.t, &problem.y);
    let rise = problem.irf.t0 - 3.0 * problem.irf.s;
    let pre: Vec<f64> = t.iter().zip(y).filter(|(&t, _)| t < rise).map(|(_, &y)| y).collect();
    let c = if pre.is_empty() {
        let tail = &y[y.len() - (y.len() / 20).max(3).min(y.len())..];
        tail.iter().sum::<f64>() / tail.len() as f64
    } else {
        pre.iter().sum::<f64>() / pre.len() as f64
    };
    let peak_idx = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    let peak = y[peak_idx] - c;
    let floor = 3.0 * (c.max(0.0) + 1.0).sqrt();
    let decay_end = y[peak_idx..]
        .iter()
        .rposition(|&v| v - c > floor)
        .map_or(y.len(), |k| peak_idx + k + 1);
    let seg_t = &t[peak_idx..decay_end];
    let seg_y: Vec<f64> = y[peak_idx..decay_end].iter().map(|v| v - c).collect();
    let span = (t[t.len() - 1] - t[peak_idx]).max(problem.irf.s);
    let third = seg_t.len() / 3;
    let (mut tau2, mut tau1) = if third >= 3 {
        (
            log_linear_lifetime(&seg_t[..third], &seg_y[..third]).unwrap_or(span / 15.0),
            log_linear_lifetime(&seg_t[2 * third..], &seg_y[2 * third..]).unwrap_or(span / 5.0),
        )
    } else {
        (span / 15.0, span / 5.0)
    };
    if tau2 > tau1 {
        std::mem::swap(&mut tau1, &mut tau2);
    }
    if tau1 < 2.0 * tau2 {
        tau2 = tau1 / 3.0;
    }
    BiexpParams {
        a: (0.5 * peak).max(1e-3),
        b: (0.5 * peak).max(1e-3),
        tau1,
        tau2,
        c,
    }
}

struct Solution {
    params: Vec<f64>,
    covariance: DMatrix<f64>,
    chi2_reduced: f64,
    condition: f64,
    iterations: usize,
}

fn solve(problem: &ReconvProblem, starts: &[Vec<f64>], bounds: &[ParamBound], cfg: &FitConfig) -> Result<Solution> {
    let opts = cfg.lm_options();
    // lowest cost among converged starts, else lowest overall
    let best = starts
        .iter()
        .filter_map(|x0| lm::minimize(problem, x0, bounds, &opts))
        .min_by(|a, b| b.converged.cmp(&a.converged).then(a.cost.total_cmp(&b.cost)))
        .ok_or_else(|| Error::FitFailed("model evaluation was non-finite at every starting point".into()))?;

    let n = problem.n_params();
    let dof = problem.n_residuals().saturating_sub(n).max(1);
    let chi2_reduced = best.cost / dof as f64;
    let fisher = best.jacobian.tr_mul(&best.jacobian);
    let (covariance, condition) = invert_scaled(&fisher);
    let covariance = match problem_weighting(cfg) {
        Weighting::Poisson => covariance,
        Weighting::Uniform => covariance * chi2_reduced,
    };
    if !best.converged {
        // a degenerate model is the more useful diagnosis
        if condition > MAX_CONDITION_NUMBER {
            return Err(Error::IllConditioned {
                reason: format!("covariance condition number {condition:.3e} without convergence"),
            });
        }
        return Err(Error::NonConvergence {
            iterations: best.iterations,
        });
    }
    Ok(Solution {
        params: best.params,
        covariance,
        chi2_reduced,
        condition,
        iterations: best.iterations,
    })
}

fn problem_weighting(cfg: &FitConfig) -> Weighting {
    cfg.weighting
}

/// Inverts a symmetric PSD matrix after scaling it to unit diagonal. Returns
/// the inverse and the condition number of the scaled matrix (infinite when
/// singular).
fn invert_scaled(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let n = m.nrows();
    let d: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return (DMatrix::from_element(n, n, f64::NAN), f64::INFINITY);
    }
    let scale: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| {
        let v = 0.5 * (m[(i, j)] + m[(j, i)]);
        v * scale[i] * scale[j]
    });
    let eig = SymmetricEigen::new(scaled);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return (DMatrix::from_element(n, n, f64::NAN), f64::INFINITY);
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
        v * scale[i] * scale[j]
    });
    (cov, max / min)
}

fn biexp_starts(guess: BiexpParams) -> Vec<Vec<f64>> {
    let base = guess.to_array().to_vec();
    let scaled = |f1: f64, f2: f64| {
        let mut v = base.clone();
        v[2] *= f1;
        v[3] *= f2;
        v
    };
    vec![base.clone(), scaled(1.5, 1.0), scaled(1.0, 0.4), scaled(0.7, 2.0)]
}

/// Fits the biexponential reconvolution model to a histogram with a fixed IRF.
pub fn fit_biexp_irf(h: &DecayHistogram, irf: &IrfModel, cfg: &FitConfig) -> Result<BiexpFitResult> {
    fit_biexp_binned(&Binned::from(h), irf, cfg)
}

/// [`fit_biexp_irf`] on arbitrary (possibly fractional) binned data.
pub fn fit_biexp_binned(data: &Binned<'_>, irf: &IrfModel, cfg: &FitConfig) -> Result<BiexpFitResult> {
    cfg.validate()?;
    let problem = ReconvProblem::new(data, irf, cfg, 2)?;
    let starts = match cfg.initial_guess {
        Some(g) => vec![g.to_array().to_vec()],
        None if cfg.multi_start => biexp_starts(initial_guess(&problem)),
        None => vec![initial_guess(&problem).to_array().to_vec()],
    };
    let sol = solve(&problem, &starts, &cfg.parameter_bounds, cfg)?;

    let mut p = sol.params;
    let mut cov = sol.covariance;
    if p[2] < p[3] {
        p.swap(0, 1);
        p.swap(2, 3);
        cov.swap_rows(0, 1);
        cov.swap_columns(0, 1);
        cov.swap_rows(2, 3);
        cov.swap_columns(2, 3);
    }
    let ratio = p[2] / p[3];
    if ratio < MIN_LIFETIME_RATIO {
        return Err(Error::IllConditioned {
            reason: format!("lifetime ratio tau1/tau2 = {ratio:.4} below {MIN_LIFETIME_RATIO}"),
        });
    }
    if sol.condition > MAX_CONDITION_NUMBER {
        return Err(Error::IllConditioned {
            reason: format!("covariance condition number {:.3e} exceeds {MAX_CONDITION_NUMBER:e}", sol.condition),
        });
    }
    // a component whose amplitude or lifetime is below its own error is not
    // supported by the data
    for (k, name) in [(0, "long amplitude"), (1, "short amplitude"), (2, "tau1"), (3, "tau2")] {
        let err = cov[(k, k)].sqrt();
        if !(p[k] > err) {
            return Err(Error::IllConditioned {
                reason: format!("{name} {:.4e} not resolved (standard error {err:.4e})", p[k]),
            });
        }
    }
    let covariance = std::array::from_fn(|i| std::array::from_fn(|j| cov[(i, j)]));
    Ok(BiexpFitResult {
        a_long: p[0],
        a_short: p[1],
        tau1: p[2],
        tau2: p[3],
        c_offset: p[4],
        irf: *irf,
        covariance,
        chi2_reduced: sol.chi2_reduced,
        converged: true,
        iterations: sol.iterations,
    })
}

/// Single-exponential reconvolution fit `A·E(τ) + C`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonoFitResult {
    pub amplitude: f64,
    pub tau: f64,
    pub c_offset: f64,
    pub irf: IrfModel,
    /// Ordered `[amplitude, tau, c_offset]`.
    pub covariance: [[f64; 3]; 3],
    pub chi2_reduced: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl MonoFitResult {
    pub fn tau_err(&self) -> f64 {
        self.covariance[1][1].max(0.0).sqrt()
    }
}

pub fn fit_mono_irf(h: &DecayHistogram, irf: &IrfModel, cfg: &FitConfig) -> Result<MonoFitResult> {
    fit_mono_binned(&Binned::from(h), irf, cfg)
}

pub fn fit_mono_binned(data: &Binned<'_>, irf: &IrfModel, cfg: &FitConfig) -> Result<MonoFitResult> {
    cfg.validate()?;
    let problem = ReconvProblem::new(data, irf, cfg, 1)?;
    let b = &cfg.parameter_bounds;
    let bounds = [b[0], b[2], b[4]];
    let starts = match cfg.initial_guess {
        Some(g) => vec![vec![g.a + g.b, g.tau1, g.c]],
        None => {
            let g = initial_guess(&problem);
            // amplitude-weighted mean lifetime
            let tau = (g.a * g.tau1 + g.b * g.tau2) / (g.a + g.b);
            vec![vec![g.a + g.b, tau, g.c], vec![g.a + g.b, g.tau1, g.c]]
        }
    };
    let sol = solve(&problem, &starts, &bounds, cfg)?;
    if sol.condition > MAX_CONDITION_NUMBER {
        return Err(Error::IllConditioned {
            reason: format!("covariance condition number {:.3e} exceeds {MAX_CONDITION_NUMBER:e}", sol.condition),
        });
    }
    let p = sol.params;
    Ok(MonoFitResult {
        amplitude: p[0],
        tau: p[1],
        c_offset: p[2],
        irf: *irf,
        covariance: std::array::from_fn(|i| std::array::from_fn(|j| sol.covariance[(i, j)])),
        chi2_reduced: sol.chi2_reduced,
        converged: true,
        iterations: sol.iterations,
    })
}

/// Long-lived lifetime `τ1` and its standard error.
pub fn extract_long_lifetime(r: &BiexpFitResult) -> Result<(f64, f64)> {
    if !r.converged {
        return Err(Error::NonConvergence {
            iterations: r.iterations,
        });
    }
    Ok((r.tau1, r.tau1_err()))
}
