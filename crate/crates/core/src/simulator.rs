//! Monte Carlo generator for spin-modulated decay histograms.
//!
//! Two decay channels with lifetimes τ↑ and τ↓ are mixed by the precession
//! phase `φ(t) = ωt + φ₀`: the instantaneous decay rate is
//! `r(t) = cos²φ(t)/τ↑ + sin²φ(t)/τ↓`. The simulator draws per-step Poisson
//! decay counts from that rate; [`expected_decay`] is its closed-form mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{
    initial_phase, transverse_field, AcquisitionMeta, DecayHistogram, FieldGeometry, IrfModel,
    Polarization, SpinModelParams, MIN_SAMPLED_TAU,
};
use crate::special::GL8;

/// Largest expected per-step decay fraction allowed.
pub const MAX_STEP_DECAY_FRACTION: f64 = 0.05;

/// Spin-up / spin-down occupation at time `t` for precession `ω` from phase `φ₀`.
pub fn occupancy(phi0: f64, omega: f64, t: f64) -> (f64, f64) {
    let (s, c) = (omega * t + phi0).sin_cos();
    (c * c, s * s)
}

/// Larmor angular frequency (rad/ns) driven by the transverse field.
pub fn larmor_frequency(geom: &FieldGeometry, gamma: f64) -> f64 {
    gamma * transverse_field(geom)
}

/// Fixed-lifetime two-channel decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayChannels {
    pub tau_up: f64,
    pub tau_down: f64,
    pub omega: f64,
    pub phi0: f64,
}

impl DecayChannels {
    pub fn rate(&self, t: f64) -> f64 {
        let (up, down) = occupancy(self.phi0, self.omega, t);
        up / self.tau_up + down / self.tau_down
    }

    /// `∫₀ᵗ r(u) du`.
    pub fn rate_integral(&self, t: f64) -> f64 {
        let mean = 0.5 * t * (1.0 / self.tau_up + 1.0 / self.tau_down);
        // [sin(2(ωt+φ₀)) − sin(2φ₀)]/(4ω) written as cos(ωt+2φ₀)·sin(ωt)/(2ω)
        let sin_over_omega = if self.omega == 0.0 {
            t
        } else {
            (self.omega * t).sin() / self.omega
        };
        let osc = 0.5 * (self.omega * t + 2.0 * self.phi0).cos() * sin_over_omega;
        mean + (1.0 / self.tau_up - 1.0 / self.tau_down) * osc
    }

    pub fn survival(&self, t: f64) -> f64 {
        (-self.rate_integral(t)).exp()
    }

    fn max_rate(&self) -> f64 {
        1.0 / self.tau_up.min(self.tau_down)
    }
}

/// Expected surviving population at time `t`, using the mean lifetimes.
pub fn expected_decay(params: &SpinModelParams, geom: &FieldGeometry, phi0: f64, t: f64) -> f64 {
    let channels = DecayChannels {
        tau_up: params.tau_up_mean,
        tau_down: params.tau_down_mean,
        omega: larmor_frequency(geom, params.gamma),
        phi0,
    };
    params.n0 as f64 * channels.survival(t)
}

/// One seeded Monte Carlo realisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub params: SpinModelParams,
    pub geom: FieldGeometry,
    pub pol: Polarization,
    pub seed: u64,
}

impl SimRun {
    pub fn new(params: SpinModelParams, geom: FieldGeometry, pol: Polarization, seed: u64) -> Self {
        Self {
            params,
            geom,
            pol,
            seed,
        }
    }
}

/// SplitMix64 finaliser applied to `master ⊕ stream·φ`. Used to derive
/// independent RNG streams from a master seed.
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_lifetime(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mean;
    }
    let normal = Normal::new(mean, sigma).expect("validated sigma");
    loop {
        let tau: f64 = normal.sample(rng);
        if tau >= MIN_SAMPLED_TAU {
            return tau;
        }
    }
}

/// Step size: min(τ)/200, capped at a 50th of the precession period, then
/// shrunk so an integer number of steps fills each bin.
pub fn default_step(tau_min: f64, omega: f64, bin_width: f64) -> f64 {
    let mut dt = tau_min / 200.0;
    if omega > 0.0 {
        dt = dt.min(std::f64::consts::TAU / omega / 50.0);
    }
    let per_bin = (bin_width / dt).ceil().max(1.0);
    bin_width / per_bin
}

struct Trajectory {
    channels: DecayChannels,
    dt: f64,
    horizon: f64,
}

impl Trajectory {
    fn prepare(run: &SimRun, rng: &mut ChaCha8Rng) -> Result<Self> {
        run.params.validate()?;
        let p = &run.params;
        let tau_up = sample_lifetime(rng, p.tau_up_mean, p.sigma_tau);
        let tau_down = sample_lifetime(rng, p.tau_down_mean, p.sigma_tau);
        let channels = DecayChannels {
            tau_up,
            tau_down,
            omega: larmor_frequency(&run.geom, p.gamma),
            phi0: initial_phase(run.pol),
        };
        let dt = match p.dt {
            Some(dt) => dt,
            None => default_step(tau_up.min(tau_down), channels.omega, p.bin_width),
        };
        let fraction = dt * channels.max_rate();
        if fraction > MAX_STEP_DECAY_FRACTION {
            return Err(Error::StepTooCoarse { dt, fraction });
        }
        Ok(Self {
            channels,
            dt,
            horizon: p.n_bins() as f64 * p.bin_width,
        })
    }

    /// Runs the Poisson thinning loop, calling `emit(step_start, step_len, decays)`.
    /// Returns the survivors at the horizon.
    fn run(&self, n0: u64, rng: &mut ChaCha8Rng, mut emit: impl FnMut(f64, f64, u64)) -> u64 {
        let mut alive = n0;
        let n_steps = (self.horizon / self.dt).ceil() as usize;
        for k in 0..n_steps {
            if alive == 0 {
                break;
            }
            let start = k as f64 * self.dt;
            let len = self.dt.min(self.horizon - start);
            if len <= 0.0 {
                break;
            }
            let lambda = alive as f64 * self.channels.rate(start + 0.5 * len) * len;
            if lambda <= 0.0 {
                continue;
            }
            let draw: f64 = Poisson::new(lambda).expect("positive finite rate").sample(rng);
            let decays = (draw as u64).min(alive);
            if decays > 0 {
                alive -= decays;
                emit(start, len, decays);
            }
        }
        alive
    }
}

fn run_meta(run: &SimRun, traj: &Trajectory, survivors: u64) -> AcquisitionMeta {
    let mut meta = AcquisitionMeta::new(run.geom, run.pol);
    meta.seed = run.seed;
    meta.sampled_tau_up = Some(traj.channels.tau_up);
    meta.sampled_tau_down = Some(traj.channels.tau_down);
    meta.survivors = Some(survivors);
    meta
}

/// Simulates one decay histogram starting from `n0` excited particles.
///
/// Emitted counts plus the survivors recorded in the metadata equal `n0`.
pub fn simulate_decay(run: &SimRun) -> Result<DecayHistogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let traj = Trajectory::prepare(run, &mut rng)?;
    let bw = run.params.bin_width;
    let mut counts = vec![0u64; run.params.n_bins()];
    let last = counts.len() - 1;
    let survivors = traj.run(run.params.n0, &mut rng, |start, len, d| {
        let idx = (((start + 0.5 * len) / bw).floor() as usize).min(last);
        counts[idx] += d;
    });
    DecayHistogram::new(0.0, bw, counts, run_meta(run, &traj, survivors))
}

/// Like [`simulate_decay`], but every event is placed uniformly inside its
/// step and then delayed by `t0` plus Gaussian jitter of width `s`.
///
/// The decay counts per step are the same as [`simulate_decay`] for the same
/// seed; the jitter uses a separate derived stream.
pub fn simulate_with_irf(run: &SimRun, irf: &IrfModel) -> Result<DecayHistogram> {
    let bw = run.params.bin_width;
    if irf.s < bw / 10.0 {
        return Err(Error::invalid(
            "irf.s",
            format!("must be at least bin_width/10 = {} ns", bw / 10.0),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(mix_seed(run.seed, 1));
    let traj = Trajectory::prepare(run, &mut rng)?;
    let n_bins = run.params.n_bins();
    let mut counts = vec![0u64; n_bins];
    let mut lost = 0u64;
    let survivors = traj.run(run.params.n0, &mut rng, |start, len, d| {
        for _ in 0..d {
            let u: f64 = jitter_rng.random();
            let g: f64 = StandardNormal.sample(&mut jitter_rng);
            let t = start + u * len + irf.t0 + irf.s * g;
            let idx = (t / bw).floor();
            if idx >= 0.0 && (idx as usize) < n_bins {
                counts[idx as usize] += 1;
            } else {
                lost += 1;
            }
        }
    });
    let mut meta = run_meta(run, &traj, survivors);
    meta.lost = Some(lost);
    DecayHistogram::new(0.0, bw, counts, meta)
}

/// Noise-free expected histogram on the simulator's time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleHistogram {
    pub t_start: f64,
    pub bin_width: f64,
    pub expected: Vec<f64>,
}

/// Expected bin counts of the histogram [`simulate_decay`] (no IRF) or
/// [`simulate_with_irf`] would produce with `σ_τ = 0`.
///
/// Without an IRF bins hold the exact population drop `N(t_lo) − N(t_hi)`.
/// With an IRF they hold `bin_width ×` the Gaussian-smeared decay density at
/// the bin centre, computed by composite Gauss-Legendre quadrature.
pub fn oracle_histogram(
    params: &SpinModelParams,
    geom: &FieldGeometry,
    pol: Polarization,
    irf: Option<&IrfModel>,
) -> Result<OracleHistogram> {
    params.validate()?;
    let channels = DecayChannels {
        tau_up: params.tau_up_mean,
        tau_down: params.tau_down_mean,
        omega: larmor_frequency(geom, params.gamma),
        phi0: initial_phase(pol),
    };
    let n0 = params.n0 as f64;
    let bw = params.bin_width;
    let n_bins = params.n_bins();
    let horizon = n_bins as f64 * bw;

    let expected = match irf {
        None => (0..n_bins)
            .map(|i| {
                let lo = i as f64 * bw;
                n0 * (channels.survival(lo) - channels.survival(lo + bw))
            })
            .collect(),
        Some(irf) => {
            let mut h = irf.s / 4.0;
            if channels.omega > 0.0 {
                h = h.min(std::f64::consts::PI / (8.0 * channels.omega));
            }
            let n_panels = (horizon / h).ceil() as usize;
            let h = horizon / n_panels as f64;
            // quadrature nodes of the emission density f(u) = N(u)·r(u)
            let mut nodes = Vec::with_capacity(n_panels * GL8.len());
            for p in 0..n_panels {
                let mid = (p as f64 + 0.5) * h;
                for &(x, w) in &GL8 {
                    let u = mid + 0.5 * h * x;
                    let f = n0 * channels.survival(u) * channels.rate(u);
                    nodes.push((u, f * w * 0.5 * h));
                }
            }
            let reach = 9.0 * irf.s;
            let norm = 1.0 / (irf.s * (2.0 * std::f64::consts::PI).sqrt());
            (0..n_bins)
                .map(|i| {
                    let c = (i as f64 + 0.5) * bw - irf.t0;
                    let first = (((c - reach) / h).floor().max(0.0) as usize).min(n_panels);
                    let last = (((c + reach) / h).ceil().max(0.0) as usize).min(n_panels);
                    let density: f64 = nodes[first * GL8.len()..last * GL8.len()]
                        .iter()
                        .map(|&(u, fw)| fw * (-0.5 * ((c - u) / irf.s).powi(2)).exp())
                        .sum();
                    bw * norm * density
                })
                .collect()
        }
    };
    Ok(OracleHistogram {
        t_start: 0.0,
        bin_width: bw,
        expected,
    })
}
