//! Domain types shared by the simulator, the fitter and the file formats.
//!
//! Angles are degrees at every public boundary and radians internally.
//! Times are nanoseconds, fields are Gauss.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Excitation polarization. Selects the initial spin phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarization {
    Lcp,
    Rcp,
}

impl Polarization {
    pub const ALL: [Polarization; 2] = [Polarization::Lcp, Polarization::Rcp];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarization::Lcp => "LCP",
            Polarization::Rcp => "RCP",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarization::Lcp => Polarization::Rcp,
            Polarization::Rcp => Polarization::Lcp,
        }
    }
}

impl fmt::Display for Polarization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LCP" => Ok(Polarization::Lcp),
            "RCP" => Ok(Polarization::Rcp),
            other => Err(Error::invalid(
                "polarization",
                format!("expected LCP or RCP, got {other:?}"),
            )),
        }
    }
}

/// Initial precession phase set by the excitation polarization:
/// RCP starts in the spin-up channel (0), LCP in spin-down (π/2).
pub fn initial_phase(pol: Polarization) -> f64 {
    match pol {
        Polarization::Rcp => 0.0,
        Polarization::Lcp => FRAC_PI_2,
    }
}

/// Unit vector from a polar angle (from the sample normal) and an azimuth, both in degrees.
pub fn unit_from_angles(polar_deg: f64, azimuth_deg: f64) -> [f64; 3] {
    let (st, ct) = polar_deg.to_radians().sin_cos();
    let (sp, cp) = azimuth_deg.to_radians().sin_cos();
    [st * cp, st * sp, ct]
}

pub const DEFAULT_CHIRAL_TILT_DEG: f64 = 30.0;
pub const DEFAULT_CHIRAL_AZIMUTH_DEG: f64 = 180.0;
pub const DEFAULT_FIELD_THETA_DEG: f64 = 45.0;

/// Applied magnetic field and the chiral molecular axis it is projected against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldGeometry {
    magnitude: f64,
    theta_deg: f64,
    phi_deg: f64,
    chiral_axis: [f64; 3],
}

impl FieldGeometry {
    pub fn new(magnitude: f64, theta_deg: f64, phi_deg: f64, chiral_axis: [f64; 3]) -> Result<Self> {
        if !(magnitude.is_finite() && magnitude >= 0.0) {
            return Err(Error::invalid("magnitude", format!("must be finite and >= 0, got {magnitude}")));
        }
        if !theta_deg.is_finite() || !phi_deg.is_finite() {
            return Err(Error::invalid("theta/phi", "angles must be finite"));
        }
        let norm = chiral_axis.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("chiral_axis", format!("must be a unit vector, |n| = {norm}")));
        }
        Ok(Self {
            magnitude,
            theta_deg,
            phi_deg,
            chiral_axis,
        })
    }

    /// Field at the given magnitude and angles with the default chiral axis.
    pub fn with_default_axis(magnitude: f64, theta_deg: f64, phi_deg: f64) -> Result<Self> {
        Self::new(
            magnitude,
            theta_deg,
            phi_deg,
            unit_from_angles(DEFAULT_CHIRAL_TILT_DEG, DEFAULT_CHIRAL_AZIMUTH_DEG),
        )
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta_deg
    }

    pub fn phi_deg(&self) -> f64 {
        self.phi_deg
    }

    pub fn chiral_axis(&self) -> [f64; 3] {
        self.chiral_axis
    }

    pub fn field_direction(&self) -> [f64; 3] {
        unit_from_angles(self.theta_deg, self.phi_deg)
    }

    /// Same geometry at a different field magnitude.
    pub fn with_magnitude(&self, magnitude: f64) -> Result<Self> {
        Self::new(magnitude, self.theta_deg, self.phi_deg, self.chiral_axis)
    }

    /// sin of the angle between the chiral axis and the field direction.
    pub fn sin_alpha(&self) -> f64 {
        let b = self.field_direction();
        let n = self.chiral_axis;
        let cos = (n[0] * b[0] + n[1] * b[1] + n[2] * b[2]).clamp(-1.0, 1.0);
        (1.0 - cos * cos).max(0.0).sqrt()
    }
}

/// Component of the field perpendicular to the chiral axis, `|B| sin α`.
pub fn transverse_field(geom: &FieldGeometry) -> f64 {
    geom.magnitude * geom.sin_alpha()
}

/// Parameters of the two-channel spin-precession decay model.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinModelParams {
    pub tau_up_mean: f64,
    pub tau_down_mean: f64,
    /// Standard deviation of the per-run lifetime draw.
    pub sigma_tau: f64,
    /// Effective gyromagnetic ratio, rad ns⁻¹ G⁻¹.
    pub gamma: f64,
    pub n0: u64,
    /// Integration step; `None` picks a step resolving both decay and precession.
    pub dt: Option<f64>,
    /// Histogram span; `None` means 10 × the longer mean lifetime.
    pub horizon: Option<f64>,
    pub bin_width: f64,
}

/// Lifetimes are redrawn until they clear this floor.
pub const MIN_SAMPLED_TAU: f64 = 0.1;

impl Default for SpinModelParams {
    fn default() -> Self {
        Self {
            tau_up_mean: 20.0,
            tau_down_mean: 12.0,
            sigma_tau: 1.0,
            gamma: 6.0e-5,
            n0: 1_000_000,
            dt: None,
            horizon: None,
            bin_width: 0.1,
        }
    }
}

impl SpinModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be finite and > 0, got {v}")))
            }
        };
        positive("tau_up_mean", self.tau_up_mean)?;
        positive("tau_down_mean", self.tau_down_mean)?;
        positive("bin_width", self.bin_width)?;
        if !(self.sigma_tau.is_finite() && self.sigma_tau >= 0.0) {
            return Err(Error::invalid("sigma_tau", "must be finite and >= 0"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid("gamma", "must be finite and >= 0"));
        }
        if let Some(dt) = self.dt {
            positive("dt", dt)?;
            if dt > self.bin_width {
                return Err(Error::invalid("dt", format!("must not exceed bin_width ({} ns)", self.bin_width)));
            }
        }
        let horizon = self.horizon();
        positive("horizon", horizon)?;
        if self.n_bins() < 2 {
            return Err(Error::invalid("horizon", "histogram needs at least 2 bins"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
            .unwrap_or(10.0 * self.tau_up_mean.max(self.tau_down_mean))
    }

    pub fn n_bins(&self) -> usize {
        (self.horizon() / self.bin_width).round().max(0.0) as usize
    }

    /// L-chiral parameter set: the mirror image of D, with the channel lifetimes swapped.
    pub fn mirrored(&self) -> Self {
        Self {
            tau_up_mean: self.tau_down_mean,
            tau_down_mean: self.tau_up_mean,
            ..self.clone()
        }
    }
}

/// Gaussian instrument response: width `s` and delay `t0`, both in ns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrfModel {
    pub s: f64,
    pub t0: f64,
}

impl IrfModel {
    pub fn new(s: f64, t0: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid("irf.s", format!("must be finite and > 0, got {s}")));
        }
        if !t0.is_finite() {
            return Err(Error::invalid("irf.t0", "must be finite"));
        }
        Ok(Self { s, t0 })
    }
}

impl Default for IrfModel {
    fn default() -> Self {
        Self { s: 0.5, t0: 5.0 }
    }
}

impl FromStr for IrfModel {
    type Err = Error;

    /// Parses `"s,t0"`.
    fn from_str(text: &str) -> Result<Self> {
        let mut parts = text.split(',').map(str::trim);
        let (Some(s), Some(t0), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::invalid("irf", format!("expected \"s,t0\", got {text:?}")));
        };
        let parse = |v: &str| {
            v.parse::<f64>()
                .map_err(|e| Error::invalid("irf", format!("{v:?}: {e}")))
        };
        IrfModel::new(parse(s)?, parse(t0)?)
    }
}

/// Acquisition context carried alongside a histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionMeta {
    pub field: FieldGeometry,
    pub polarization: Polarization,
    pub seed: u64,
    pub label: String,
    pub config_hash: Option<String>,
    pub sampled_tau_up: Option<f64>,
    pub sampled_tau_down: Option<f64>,
    /// Population still excited at the end of the simulated horizon.
    pub survivors: Option<u64>,
    /// Events that left the histogram window after IRF jitter.
    pub lost: Option<u64>,
}

impl AcquisitionMeta {
    pub fn new(field: FieldGeometry, polarization: Polarization) -> Self {
        Self {
            field,
            polarization,
            seed: 0,
            label: String::new(),
            config_hash: None,
            sampled_tau_up: None,
            sampled_tau_down: None,
            survivors: None,
            lost: None,
        }
    }
}

/// Binned photon-arrival counts. Bin `i` covers `[t_start + i·w, t_start + (i+1)·w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayHistogram {
    bin_width: f64,
    t_start: f64,
    counts: Vec<u64>,
    total: u64,
    pub meta: AcquisitionMeta,
}

impl DecayHistogram {
    pub fn new(t_start: f64, bin_width: f64, counts: Vec<u64>, meta: AcquisitionMeta) -> Result<Self> {
        if !(bin_width.is_finite() && bin_width > 0.0) {
            return Err(Error::invalid("bin_width", format!("must be finite and > 0, got {bin_width}")));
        }
        if !t_start.is_finite() {
            return Err(Error::invalid("t_start", "must be finite"));
        }
        if counts.len() < 2 {
            return Err(Error::invalid("counts", "histogram needs at least 2 bins"));
        }
        let total = counts.iter().sum();
        Ok(Self {
            bin_width,
            t_start,
            counts,
            total,
            meta,
        })
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.t_start + (i as f64 + 0.5) * self.bin_width
    }

    pub fn bin_centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.counts.len()).map(|i| self.bin_center(i))
    }

    /// Index of the bin containing `t`, if inside the window.
    pub fn bin_index(&self, t: f64) -> Option<usize> {
        let n = self.counts.len();
        if !(t >= self.t_start && t < self.t_start + n as f64 * self.bin_width) {
            return None;
        }
        // floor can land on n for t just below the upper edge
        Some((((t - self.t_start) / self.bin_width).floor() as usize).min(n - 1))
    }

    /// Bin-wise sum of histograms sharing the same time grid.
    pub fn accumulate(&mut self, other: &DecayHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len()
            || other.bin_width != self.bin_width
            || other.t_start != self.t_start
        {
            return Err(Error::invalid("histogram", "cannot accumulate histograms on different grids"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Fitted biexponential reconvolution parameters.
///
/// Covariance rows/columns are ordered `[a_long, a_short, tau1, tau2, c_offset]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiexpFitResult {
    pub a_long: f64,
    pub a_short: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub c_offset: f64,
    pub irf: IrfModel,
    pub covariance: [[f64; 5]; 5],
    pub chi2_reduced: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl BiexpFitResult {
    pub fn tau1_err(&self) -> f64 {
        self.covariance[2][2].max(0.0).sqrt()
    }

    pub fn tau2_err(&self) -> f64 {
        self.covariance[3][3].max(0.0).sqrt()
    }
}
