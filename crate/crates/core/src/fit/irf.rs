//! Gaussian IRF calibration from a scattered-laser reference histogram.

use nalgebra::{DMatrix, DVector};

use super::lm::{self, LmOptions, ParamBound, Residuals};
use crate::error::{Error, Result};
use crate::model::{DecayHistogram, IrfModel};
use crate::special::norm_cdf;

/// Minimum peak height relative to `max(baseline, 1)`.
pub const MIN_PEAK_TO_BASELINE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct IrfCalibration {
    pub irf: IrfModel,
    /// Total counts in the pulse (Gaussian area).
    pub amplitude: f64,
    /// Per-bin background.
    pub baseline: f64,
    /// The pulse is not resolved by the binning; `irf.s` is then the
    /// uniform-bin width `bin_width/√12`, an upper-bound estimate.
    pub resolution_limited: bool,
}

/// Bin-integrated Gaussian plus constant: `[area, t0, s, base]`.
struct GaussBins {
    lo: Vec<f64>,
    hi: Vec<f64>,
    y: Vec<f64>,
    sqrt_w: Vec<f64>,
}

impl Residuals for GaussBins {
    fn n_residuals(&self) -> usize {
        self.y.len()
    }

    fn eval(&self, p: &[f64], r: &mut DVector<f64>, mut j: Option<&mut DMatrix<f64>>) -> bool {
        let (area, t0, s, base) = (p[0], p[1], p[2], p[3]);
        let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for i in 0..self.y.len() {
            let (u_lo, u_hi) = ((self.lo[i] - t0) / s, (self.hi[i] - t0) / s);
            let mass = norm_cdf(u_hi) - norm_cdf(u_lo);
            r[i] = self.sqrt_w[i] * (area * mass + base - self.y[i]);
            if let Some(j) = j.as_deref_mut() {
                let w = self.sqrt_w[i];
                j[(i, 0)] = w * mass;
                j[(i, 1)] = w * area * (pdf(u_lo) - pdf(u_hi)) / s;
                j[(i, 2)] = w * area * (u_lo * pdf(u_lo) - u_hi * pdf(u_hi)) / s;
                j[(i, 3)] = w;
            }
            if !r[i].is_finite() {
                return false;
            }
        }
        true
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
}

/// Fits a Gaussian pulse (area, t0, s, baseline) to a reference histogram.
pub fn calibrate_irf(h: &DecayHistogram) -> Result<IrfCalibration> {
    let y = h.counts_f64();
    let bw = h.bin_width();
    let baseline = median(&y);
    let (peak_idx, &peak) = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("histogram has bins");
    let ratio = peak / baseline.max(1.0);
    if ratio < MIN_PEAK_TO_BASELINE {
        return Err(Error::FitFailed(format!(
            "peak-to-baseline ratio {ratio:.2} below {MIN_PEAK_TO_BASELINE}; no usable reference pulse"
        )));
    }

    let excess: Vec<f64> = y.iter().map(|v| (v - baseline).max(0.0)).collect();
    let area: f64 = excess.iter().sum();
    let resolution_floor = bw / 12f64.sqrt();
    if excess[peak_idx] >= 0.9 * area {
        return Ok(IrfCalibration {
            irf: IrfModel::new(resolution_floor, h.bin_center(peak_idx))?,
            amplitude: area,
            baseline,
            resolution_limited: true,
        });
    }

    // moment estimates for the start point
    let mean = excess.iter().enumerate().map(|(i, w)| w * h.bin_center(i)).sum::<f64>() / area;
    let var = excess
        .iter()
        .enumerate()
        .map(|(i, w)| w * (h.bin_center(i) - mean).powi(2))
        .sum::<f64>()
        / area;
    let s0 = var.sqrt().max(resolution_floor);

    let problem = GaussBins {
        lo: (0..y.len()).map(|i| h.t_start() + i as f64 * bw).collect(),
        hi: (0..y.len()).map(|i| h.t_start() + (i + 1) as f64 * bw).collect(),
        sqrt_w: y.iter().map(|v| 1.0 / v.max(1.0).sqrt()).collect(),
        y,
    };
    let bounds = [
        ParamBound::lower(0.0),
        ParamBound::FREE,
        ParamBound::lower(1e-3 * bw),
        ParamBound::FREE,
    ];
    let out = lm::minimize(&problem, &[area, h.bin_center(peak_idx), s0, baseline], &bounds, &LmOptions::default())
        .ok_or_else(|| Error::FitFailed("IRF model evaluation became non-finite".into()))?;
    if !out.converged {
        return Err(Error::NonConvergence {
            iterations: out.iterations,
        });
    }
    let (s, resolution_limited) = if out.params[2] < resolution_floor {
        (resolution_floor, true)
    } else {
        (out.params[2], false)
    };
    Ok(IrfCalibration {
        irf: IrfModel::new(s, out.params[1])?,
        amplitude: out.params[0],
        baseline: out.params[3],
        resolution_limited,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AcquisitionMeta, FieldGeometry, Polarization};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn hist(counts: Vec<u64>, bw: f64) -> DecayHistogram {
        let meta = AcquisitionMeta::new(FieldGeometry::with_default_axis(0.0, 45.0, 0.0).unwrap(), Polarization::Rcp);
        DecayHistogram::new(0.0, bw, counts, meta).unwrap()
    }

    #[test]
    fn recovers_noisy_gaussian() {
        let bw = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let counts = (0..400)
            .map(|i| {
                let (lo, hi) = (i as f64 * bw, (i + 1) as f64 * bw);
                let mu = 1e5 * (norm_cdf((hi - 5.0) / 0.4) - norm_cdf((lo - 5.0) / 0.4)) + 5.0;
                Poisson::new(mu).unwrap().sample(&mut rng) as u64
            })
            .collect();
        let cal = calibrate_irf(&hist(counts, bw)).unwrap();
        assert!((cal.irf.s - 0.4).abs() < 0.02 * 0.4, "{cal:?}");
        assert!((cal.irf.t0 - 5.0).abs() < 0.02 * 5.0, "{cal:?}");
        assert!(!cal.resolution_limited);
    }

    #[test]
    fn single_bin_pulse_is_resolution_limited() {
        let mut counts = vec![2u64; 200];
        counts[50] = 10_000;
        let cal = calibrate_irf(&hist(counts, 0.1)).unwrap();
        assert!(cal.resolution_limited);
        assert!((cal.irf.s - 0.1 / 12f64.sqrt()).abs() < 1e-12);
        assert!((cal.irf.t0 - 5.05).abs() < 1e-9);
    }

    #[test]
    fn flat_histogram_fails() {
        let err = calibrate_irf(&hist(vec![100; 200], 0.1)).unwrap_err();
        assert!(matches!(err, Error::FitFailed(_)));
    }
}
