//! Field-magnitude / azimuth sweeps and the RCP − LCP lifetime difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fit::{fit_biexp_binned, fit_mono_binned, Binned, FitConfig};
use crate::model::{
    unit_from_angles, FieldGeometry, IrfModel, Polarization, SpinModelParams,
    DEFAULT_CHIRAL_AZIMUTH_DEG, DEFAULT_CHIRAL_TILT_DEG, DEFAULT_FIELD_THETA_DEG,
};
use crate::simulator::{mix_seed, oracle_histogram, simulate_with_irf, SimRun};

/// Two sweep coordinates are the same point when they agree to this.
const COORD_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepMode {
    /// Fit accumulated Monte Carlo histograms.
    #[default]
    MonteCarlo,
    /// Fit noise-free expected histograms.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    /// Field magnitudes, Gauss.
    pub b_values: Vec<f64>,
    /// Azimuths, degrees. Each azimuth is one measurement set.
    pub phi_values: Vec<f64>,
    pub theta_deg: f64,
    pub chiral_axis: [f64; 3],
    pub polarizations: Vec<Polarization>,
    /// Histograms accumulated per point before fitting.
    pub runs_per_point: usize,
    pub master_seed: u64,
    pub randomize_order: bool,
    /// Worker threads; 0 uses all cores.
    pub parallelism: usize,
    pub mode: SweepMode,
    pub fit: FitConfig,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            b_values: (0..=48).map(|i| 60.0 + 20.0 * i as f64).collect(),
            phi_values: (0..=6).map(|i| -40.0 + 20.0 * i as f64).collect(),
            theta_deg: DEFAULT_FIELD_THETA_DEG,
            chiral_axis: unit_from_angles(DEFAULT_CHIRAL_TILT_DEG, DEFAULT_CHIRAL_AZIMUTH_DEG),
            polarizations: Polarization::ALL.to_vec(),
            runs_per_point: 1,
            master_seed: 0,
            randomize_order: true,
            parallelism: 0,
            mode: SweepMode::MonteCarlo,
            fit: FitConfig::default(),
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.b_values.is_empty() {
            return Err(Error::invalid("sweep.b_values", "must not be empty"));
        }
        if let Some(b) = self.b_values.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::invalid("sweep.b_values", format!("{b} is not a finite field >= 0")));
        }
        if self.phi_values.is_empty() {
            return Err(Error::invalid("sweep.phi_values", "must not be empty"));
        }
        if self.phi_values.iter().any(|p| !p.is_finite()) || !self.theta_deg.is_finite() {
            return Err(Error::invalid("sweep", "angles must be finite"));
        }
        if self.polarizations.is_empty() {
            return Err(Error::invalid("sweep.polarizations", "must not be empty"));
        }
        if self.runs_per_point == 0 {
            return Err(Error::invalid("sweep.runs_per_point", "must be >= 1"));
        }
        // validates the chiral axis
        FieldGeometry::new(0.0, self.theta_deg, 0.0, self.chiral_axis)?;
        self.fit.validate()
    }

    fn point_count(&self) -> usize {
        self.phi_values.len() * self.b_values.len() * self.polarizations.len()
    }
}

/// One `(φ, B, polarization)` sweep point, by index into the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SweepPoint {
    pub phi_index: usize,
    pub b_index: usize,
    pub polarization: Polarization,
}

/// Execution order: azimuth sets in plan order, each set's `(B, pol)` points
/// permuted independently from `master_seed` when `randomize_order` is set.
pub fn shuffle_plan(plan: &SweepPlan) -> Vec<SweepPoint> {
    let mut order = Vec::with_capacity(plan.point_count());
    for phi_index in 0..plan.phi_values.len() {
        let mut set: Vec<SweepPoint> = (0..plan.b_values.len())
            .flat_map(|b_index| {
                plan.polarizations.iter().map(move |&polarization| SweepPoint {
                    phi_index,
                    b_index,
                    polarization,
                })
            })
            .collect();
        if plan.randomize_order {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(plan.master_seed, phi_index as u64));
            for i in (1..set.len()).rev() {
                let j = rng.random_range(0..=i);
                set.swap(i, j);
            }
        }
        order.extend(set);
    }
    order
}

/// Seed of a point, a function of its coordinates only.
pub fn point_seed(master: u64, phi_deg: f64, b_gauss: f64, pol: Polarization) -> u64 {
    let s = mix_seed(master, phi_deg.to_bits());
    let s = mix_seed(s, b_gauss.to_bits());
    mix_seed(s, pol as u64 + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointStatus {
    /// Biexponential fit; `τ_long` is its long component.
    Biexp,
    /// The biexponential fit was degenerate; `τ_long` is a single-exponential lifetime.
    Mono,
    /// No lifetime could be extracted.
    Failed(String),
}

impl PointStatus {
    pub fn flag(&self) -> &str {
        match self {
            PointStatus::Biexp => "ok",
            PointStatus::Mono => "mono",
            PointStatus::Failed(_) => "failed",
        }
    }

    pub fn is_ok(&self) -> bool {
        !matches!(self, PointStatus::Failed(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub b_gauss: f64,
    pub phi_deg: f64,
    pub polarization: Polarization,
    pub tau_long: f64,
    pub tau_long_err: f64,
    pub chi2_reduced: f64,
    pub seed: u64,
    pub status: PointStatus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaRecord {
    pub phi_deg: f64,
    pub b_gauss: f64,
    /// `τ_RCP − τ_LCP`, ns.
    pub dtau: f64,
    pub dtau_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Sorted by `(φ, B, polarization)`.
    pub records: Vec<SweepRecord>,
    /// Points with both polarizations extracted, sorted by `(φ, B)`.
    pub deltas: Vec<DeltaRecord>,
}

impl SweepResult {
    pub fn from_records(mut records: Vec<SweepRecord>) -> Self {
        records.sort_by(|a, b| {
            a.phi_deg
                .total_cmp(&b.phi_deg)
                .then(a.b_gauss.total_cmp(&b.b_gauss))
                .then(a.polarization.cmp(&b.polarization))
        });
        let mut deltas = Vec::new();
        for r in records.iter().filter(|r| r.polarization == Polarization::Rcp) {
            let mut partial = SweepResult {
                records: Vec::new(),
                deltas: Vec::new(),
            };
            partial.records = records
                .iter()
                .filter(|o| same(o.phi_deg, r.phi_deg) && same(o.b_gauss, r.b_gauss))
                .cloned()
                .collect();
            if let Ok((dtau, dtau_err)) = delta_lifetime(&partial, r.b_gauss, r.phi_deg) {
                deltas.push(DeltaRecord {
                    phi_deg: r.phi_deg,
                    b_gauss: r.b_gauss,
                    dtau,
                    dtau_err,
                });
            }
        }
        Self { records, deltas }
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepRecord> {
        self.records.iter().filter(|r| !r.status.is_ok())
    }

    /// Δτ records at azimuth `phi_deg`, ascending in B.
    pub fn deltas_at_phi(&self, phi_deg: f64) -> Vec<DeltaRecord> {
        self.deltas.iter().filter(|d| same(d.phi_deg, phi_deg)).copied().collect()
    }

    /// Δτ records at field `b_gauss`, ascending in φ.
    pub fn deltas_at_field(&self, b_gauss: f64) -> Vec<DeltaRecord> {
        self.deltas.iter().filter(|d| same(d.b_gauss, b_gauss)).copied().collect()
    }
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= COORD_EPS * (1.0 + a.abs().max(b.abs()))
}

/// Fits one binned trace, falling back to a single exponential when the
/// biexponential model is degenerate. Returns `(τ_long, err, χ²_red, status)`.
pub fn extract_point(data: &Binned<'_>, irf: &IrfModel, cfg: &FitConfig) -> (f64, f64, f64, PointStatus) {
    match fit_biexp_binned(data, irf, cfg) {
        Ok(r) => (r.tau1, r.tau1_err(), r.chi2_reduced, PointStatus::Biexp),
        Err(Error::IllConditioned { .. }) => match fit_mono_binned(data, irf, cfg) {
            Ok(m) => (m.tau, m.tau_err(), m.chi2_reduced, PointStatus::Mono),
            Err(e) => (f64::NAN, f64::NAN, f64::NAN, PointStatus::Failed(e.to_string())),
        },
        Err(e) => (f64::NAN, f64::NAN, f64::NAN, PointStatus::Failed(e.to_string())),
    }
}

fn run_point(plan: &SweepPlan, params: &SpinModelParams, irf: &IrfModel, pt: SweepPoint) -> Result<SweepRecord> {
    let phi_deg = plan.phi_values[pt.phi_index];
    let b_gauss = plan.b_values[pt.b_index];
    let seed = point_seed(plan.master_seed, phi_deg, b_gauss, pt.polarization);
    let geom = FieldGeometry::new(b_gauss, plan.theta_deg, phi_deg, plan.chiral_axis)?;

    let data: Binned<'static> = match plan.mode {
        SweepMode::MonteCarlo => {
            let mut acc = None;
            for run in 0..plan.runs_per_point {
                let sim = SimRun::new(params.clone(), geom, pt.polarization, mix_seed(seed, run as u64));
                let h = simulate_with_irf(&sim, irf)?;
                match acc.as_mut() {
                    None => acc = Some(h),
                    Some(a) => a.accumulate(&h)?,
                }
            }
            Binned::from(&acc.expect("runs_per_point >= 1"))
        }
        SweepMode::Oracle => {
            let o = oracle_histogram(params, &geom, pt.polarization, Some(irf))?;
            let k = plan.runs_per_point as f64;
            Binned::new(o.t_start, o.bin_width, o.expected.iter().map(|v| v * k).collect::<Vec<_>>())
        }
    };
    let (tau_long, tau_long_err, chi2_reduced, status) = extract_point(&data, irf, &plan.fit);
    Ok(SweepRecord {
        b_gauss,
        phi_deg,
        polarization: pt.polarization,
        tau_long,
        tau_long_err,
        chi2_reduced,
        seed,
        status,
    })
}

/// Runs every `(φ, B, polarization)` point of the plan and fits each one.
///
/// Per-point failures, including simulation errors, are recorded as
/// [`PointStatus::Failed`]; only an invalid plan or parameter set is an error.
pub fn run_sweep(plan: &SweepPlan, params: &SpinModelParams, irf: &IrfModel) -> Result<SweepResult> {
    plan.validate()?;
    params.validate()?;
    let order = shuffle_plan(plan);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records = pool.install(|| {
        order
            .par_iter()
            .map(|&pt| {
                run_point(plan, params, irf, pt).unwrap_or_else(|e| SweepRecord {
                    b_gauss: plan.b_values[pt.b_index],
                    phi_deg: plan.phi_values[pt.phi_index],
                    polarization: pt.polarization,
                    tau_long: f64::NAN,
                    tau_long_err: f64::NAN,
                    chi2_reduced: f64::NAN,
                    seed: point_seed(
                        plan.master_seed,
                        plan.phi_values[pt.phi_index],
                        plan.b_values[pt.b_index],
                        pt.polarization,
                    ),
                    status: PointStatus::Failed(e.to_string()),
                })
            })
            .collect::<Vec<_>>()
    });
    Ok(SweepResult::from_records(records))
}

/// `Δτ = τ_RCP − τ_LCP` at `(B, φ)` with the errors added in quadrature.
pub fn delta_lifetime(result: &SweepResult, b_gauss: f64, phi_deg: f64) -> Result<(f64, f64)> {
    let find = |pol: Polarization| {
        result
            .records
            .iter()
            .find(|r| r.polarization == pol && same(r.b_gauss, b_gauss) && same(r.phi_deg, phi_deg) && r.status.is_ok())
            .ok_or(Error::MissingPolarization {
                polarization: pol,
                b_gauss,
                phi_deg,
            })
    };
    let rcp = find(Polarization::Rcp)?;
    let lcp = find(Polarization::Lcp)?;
    Ok((
        rcp.tau_long - lcp.tau_long,
        rcp.tau_long_err.hypot(lcp.tau_long_err),
    ))
}

/// Field of the first significant local extremum of Δτ(B) at azimuth `phi_deg`.
pub fn first_extremum(result: &SweepResult, phi_deg: f64) -> Result<f64> {
    let d = result.deltas_at_phi(phi_deg);
    first_extremum_of(&d)
}

/// Significance gate on extremum prominence, in units of the propagated error.
pub const EXTREMUM_SIGNIFICANCE: f64 = 2.0;

/// [`first_extremum`] on a Δτ series ordered by B.
///
/// A discrete local extremum at index `i` counts when, on each side, some
/// point lies further from it than `2 ×` their combined error. Its position
/// is refined by the vertex of the parabola through `i − 1, i, i + 1`.
pub fn first_extremum_of(d: &[DeltaRecord]) -> Result<f64> {
    if d.len() < 5 {
        return Err(Error::UnderDetermined {
            needed: 5,
            got: d.len(),
        });
    }
    let prominent = |i: usize, j: usize, sign: f64| {
        sign * (d[i].dtau - d[j].dtau) > EXTREMUM_SIGNIFICANCE * d[i].dtau_err.hypot(d[j].dtau_err)
    };
    for i in 1..d.len() - 1 {
        let (l, c, r) = (d[i - 1].dtau, d[i].dtau, d[i + 1].dtau);
        let sign = if c > l && c >= r {
            1.0
        } else if c < l && c <= r {
            -1.0
        } else {
            continue;
        };
        if (0..i).any(|j| prominent(i, j, sign)) && (i + 1..d.len()).any(|j| prominent(i, j, sign)) {
            return Ok(parabola_vertex(
                (d[i - 1].b_gauss, l),
                (d[i].b_gauss, c),
                (d[i + 1].b_gauss, r),
            ));
        }
    }
    Err(Error::NoSignificantExtremum)
}

fn parabola_vertex((x0, y0): (f64, f64), (x1, y1): (f64, f64), (x2, y2): (f64, f64)) -> f64 {
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let curvature = (d12 - d01) / (x2 - x0);
    if curvature == 0.0 {
        return x1;
    }
    // y = y0 + d01 (x − x0) + curvature (x − x0)(x − x1)
    let vertex = 0.5 * (x0 + x1) - d01 / (2.0 * curvature);
    vertex.clamp(x0, x2)
}

/// `Δτ(φ) ≈ a·cos(φ − φ_c) + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineFit {
    /// Non-negative amplitude.
    pub amplitude: f64,
    /// Degrees, in (−180, 180].
    pub phase_deg: f64,
    pub offset: f64,
    pub rms_residual: f64,
}

/// Cosine fit of Δτ against azimuth at field `b_gauss`.
pub fn cosine_fit(result: &SweepResult, b_gauss: f64) -> Result<CosineFit> {
    let d = result.deltas_at_field(b_gauss);
    let phi: Vec<f64> = d.iter().map(|r| r.phi_deg).collect();
    let y: Vec<f64> = d.iter().map(|r| r.dtau).collect();
    cosine_fit_points(&phi, &y)
}

/// Linear least squares of `y` on `[cos φ, sin φ, 1]`.
pub fn cosine_fit_points(phi_deg: &[f64], y: &[f64]) -> Result<CosineFit> {
    assert_eq!(phi_deg.len(), y.len());
    let n = y.len();
    if n < 4 {
        return Err(Error::UnderDetermined { needed: 4, got: n });
    }
    let x = nalgebra::DMatrix::from_fn(n, 3, |i, j| {
        let p = phi_deg[i].to_radians();
        [p.cos(), p.sin(), 1.0][j]
    });
    let rhs = nalgebra::DVector::from_column_slice(y);
    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= 1e-10 * sv.max() {
        return Err(Error::IllConditioned {
            reason: "azimuths do not separate cos φ, sin φ and offset".into(),
        });
    }
    let coef = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::FitFailed(e.to_string()))?;
    let resid = &x * &coef - &rhs;
    Ok(CosineFit {
        amplitude: coef[0].hypot(coef[1]),
        phase_deg: coef[1].atan2(coef[0]).to_degrees(),
        offset: coef[2],
        rms_residual: (resid.norm_squared() / n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn deltas(b: &[f64], f: impl Fn(f64) -> f64, err: f64) -> Vec<DeltaRecord> {
        b.iter()
            .map(|&b| DeltaRecord {
                phi_deg: 0.0,
                b_gauss: b,
                dtau: f(b),
                dtau_err: err,
            })
            .collect()
    }

    fn record(b: f64, phi: f64, pol: Polarization, tau: f64) -> SweepRecord {
        SweepRecord {
            b_gauss: b,
            phi_deg: phi,
            polarization: pol,
            tau_long: tau,
            tau_long_err: 0.1,
            chi2_reduced: 1.0,
            seed: 0,
            status: PointStatus::Biexp,
        }
    }

    #[test]
    fn identity_order_without_randomization() {
        let plan = SweepPlan {
            b_values: vec![10.0, 20.0, 30.0],
            phi_values: vec![0.0, 40.0],
            randomize_order: false,
            ..SweepPlan::default()
        };
        let order = shuffle_plan(&plan);
        assert_eq!(order.len(), 12);
        assert_eq!(order[0], SweepPoint { phi_index: 0, b_index: 0, polarization: Polarization::Lcp });
        assert_eq!(order[11], SweepPoint { phi_index: 1, b_index: 2, polarization: Polarization::Rcp });
    }

    #[test]
    fn shuffle_is_deterministic_and_per_set() {
        let plan = SweepPlan {
            phi_values: vec![0.0, 20.0],
            ..SweepPlan::default()
        };
        let a = shuffle_plan(&plan);
        assert_eq!(a, shuffle_plan(&plan));
        let per_set = plan.b_values.len() * 2;
        let key = |p: &SweepPoint| (p.b_index, p.polarization);
        let first: Vec<_> = a[..per_set].iter().map(key).collect();
        let second: Vec<_> = a[per_set..].iter().map(key).collect();
        assert_ne!(first, second);
        let mut sorted = first.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), per_set);
    }

    #[test]
    fn delta_and_antisymmetry() {
        let recs = vec![record(100.0, 0.0, Polarization::Rcp, 21.0), record(100.0, 0.0, Polarization::Lcp, 19.5)];
        let r = SweepResult::from_records(recs.clone());
        let (d, e) = delta_lifetime(&r, 100.0, 0.0).unwrap();
        assert_abs_diff_eq!(d, 1.5);
        assert_abs_diff_eq!(e, 0.1f64.hypot(0.1));
        let swapped = SweepResult::from_records(
            recs.into_iter()
                .map(|mut r| {
                    r.polarization = r.polarization.flipped();
                    r
                })
                .collect(),
        );
        assert_eq!(delta_lifetime(&swapped, 100.0, 0.0).unwrap().0, -d);
        assert_eq!(r.deltas.len(), 1);
    }

    #[test]
    fn missing_polarization() {
        let r = SweepResult::from_records(vec![record(100.0, 0.0, Polarization::Rcp, 21.0)]);
        assert!(matches!(
            delta_lifetime(&r, 100.0, 0.0),
            Err(Error::MissingPolarization { polarization: Polarization::Lcp, .. })
        ));
        assert!(r.deltas.is_empty());
    }

    #[test]
    fn failed_points_do_not_yield_delta() {
        let mut lcp = record(100.0, 0.0, Polarization::Lcp, f64::NAN);
        lcp.status = PointStatus::Failed("x".into());
        let r = SweepResult::from_records(vec![record(100.0, 0.0, Polarization::Rcp, 21.0), lcp]);
        assert!(delta_lifetime(&r, 100.0, 0.0).is_err());
        assert_eq!(r.failures().count(), 1);
    }

    #[test]
    fn monotone_has_no_extremum() {
        let b: Vec<f64> = (0..20).map(|i| i as f64 * 10.0).collect();
        let d = deltas(&b, |b| 0.01 * b, 0.05);
        assert!(matches!(first_extremum_of(&d), Err(Error::NoSignificantExtremum)));
        assert!(matches!(first_extremum_of(&d[..4]), Err(Error::UnderDetermined { .. })));
    }

    #[test]
    fn insignificant_wiggle_is_ignored() {
        let b: Vec<f64> = (0..20).map(|i| i as f64 * 10.0).collect();
        let d = deltas(&b, |b| 0.01 * b + if b == 50.0 { 0.05 } else { 0.0 }, 0.05);
        assert!(matches!(first_extremum_of(&d), Err(Error::NoSignificantExtremum)));
    }

    #[test]
    fn planted_sine_extremum() {
        let k = 0.01;
        let b: Vec<f64> = (0..60).map(|i| 5.0 + i as f64 * 5.0).collect();
        let d = deltas(&b, |b| (k * b).sin(), 0.01);
        let at = first_extremum_of(&d).unwrap();
        assert!((at - std::f64::consts::FRAC_PI_2 / k).abs() < 5.0, "{at}");
    }

    #[test]
    fn planted_cosine() {
        let phi: Vec<f64> = (0..7).map(|i| -40.0 + 20.0 * i as f64).collect();
        let y: Vec<f64> = phi.iter().map(|p| 2.0 * p.to_radians().cos()).collect();
        let c = cosine_fit_points(&phi, &y).unwrap();
        assert_abs_diff_eq!(c.amplitude, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c.phase_deg, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(c.offset, 0.0, epsilon = 1e-9);
        assert!(c.rms_residual < 1e-12);

        let flat = cosine_fit_points(&phi, &[0.7; 7]).unwrap();
        assert!(flat.amplitude < 1e-9);
        assert_abs_diff_eq!(flat.offset, 0.7, epsilon = 1e-12);
        assert!(matches!(cosine_fit_points(&phi[..3], &y[..3]), Err(Error::UnderDetermined { .. })));
    }

    #[test]
    fn point_seed_depends_on_identity_only() {
        let s = point_seed(9, 20.0, 100.0, Polarization::Lcp);
        assert_eq!(s, point_seed(9, 20.0, 100.0, Polarization::Lcp));
        assert_ne!(s, point_seed(9, 20.0, 100.0, Polarization::Rcp));
        assert_ne!(s, point_seed(9, 20.0, 120.0, Polarization::Lcp));
        assert_ne!(s, point_seed(10, 20.0, 100.0, Polarization::Lcp));
    }

    #[test]
    fn plan_validation() {
        assert!(SweepPlan::default().validate().is_ok());
        let bad = SweepPlan { b_values: vec![], ..SweepPlan::default() };
        assert!(bad.validate().is_err());
        let bad = SweepPlan { b_values: vec![-1.0], ..SweepPlan::default() };
        assert!(bad.validate().is_err());
        let bad = SweepPlan { runs_per_point: 0, ..SweepPlan::default() };
        assert!(bad.validate().is_err());
    }
}
