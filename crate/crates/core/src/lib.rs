//! Simulation and lifetime analysis of spin-selective photoluminescence decay
//! in chiral-linked quantum-dot assemblies.
//!
//! The crate is organised around [`DecayHistogram`], a binned TCSPC trace:
//!
//! - [`simulator`] generates Monte Carlo histograms from a two-channel
//!   spin-precession decay model and provides its closed-form expectation.
//! - [`fit`] fits histograms with the biexponential Gaussian-IRF
//!   reconvolution model and calibrates the IRF.
//! - [`sweep`] runs field-magnitude / azimuth sweeps and derives the
//!   RCP − LCP lifetime difference.
//! - [`io`] holds the file formats and the configuration document.

pub mod error;
pub mod fit;
pub mod io;
pub mod model;
pub mod simulator;
pub mod special;
pub mod sweep;

pub use error::{Error, Result};
pub use fit::{
    calibrate_irf, extract_long_lifetime, fit_biexp_irf, fit_mono_irf, model_eval, BiexpParams,
    FitConfig, IrfCalibration, MonoFitResult, Weighting,
};
pub use model::{
    initial_phase, transverse_field, AcquisitionMeta, BiexpFitResult, DecayHistogram,
    FieldGeometry, IrfModel, Polarization, SpinModelParams,
};
pub use simulator::{
    expected_decay, larmor_frequency, occupancy, simulate_decay, simulate_with_irf, SimRun,
};
pub use sweep::{
    cosine_fit, delta_lifetime, first_extremum, run_sweep, shuffle_plan, CosineFit, SweepMode,
    SweepPlan, SweepResult,
};
