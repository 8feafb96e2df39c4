//! Python bindings. Types are thin wrappers over the core crate; errors map
//! onto a small exception hierarchy rooted at `SpinlifeError`.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use spinlife_core as core;
use spinlife_core::fit::{self, Binned};
use spinlife_core::io;
use spinlife_core::sweep;
use spinlife_core::Error;

create_exception!(spinlife, SpinlifeError, PyException);
create_exception!(spinlife, StepTooCoarseError, SpinlifeError);
create_exception!(spinlife, IllConditionedError, SpinlifeError);
create_exception!(spinlife, NonConvergenceError, SpinlifeError);
create_exception!(spinlife, FitFailedError, SpinlifeError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Invalid { .. } | Error::Config(_) | Error::Parse { .. } => PyValueError::new_err(msg),
        Error::StepTooCoarse { .. } => StepTooCoarseError::new_err(msg),
        Error::IllConditioned { .. } => IllConditionedError::new_err(msg),
        Error::NonConvergence { .. } => NonConvergenceError::new_err(msg),
        Error::FitFailed(_) => FitFailedError::new_err(msg),
        _ => SpinlifeError::new_err(msg),
    }
}

fn polarization(s: &str) -> PyResult<core::Polarization> {
    s.parse().map_err(to_py)
}

#[pyclass(name = "SpinModelParams", from_py_object)]
#[derive(Clone)]
struct PySpinModelParams(core::SpinModelParams);

#[pymethods]
impl PySpinModelParams {
    #[new]
    #[pyo3(signature = (tau_up=20.0, tau_down=12.0, sigma_tau=None, gamma=None, n0=None, bin_width=None, dt=None, horizon=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        tau_up: f64,
        tau_down: f64,
        sigma_tau: Option<f64>,
        gamma: Option<f64>,
        n0: Option<u64>,
        bin_width: Option<f64>,
        dt: Option<f64>,
        horizon: Option<f64>,
    ) -> PyResult<Self> {
        let d = core::SpinModelParams::default();
        let p = core::SpinModelParams {
            tau_up_mean: tau_up,
            tau_down_mean: tau_down,
            sigma_tau: sigma_tau.unwrap_or(d.sigma_tau),
            gamma: gamma.unwrap_or(d.gamma),
            n0: n0.unwrap_or(d.n0),
            bin_width: bin_width.unwrap_or(d.bin_width),
            dt,
            horizon,
        };
        p.validate().map_err(to_py)?;
        Ok(Self(p))
    }

    #[getter]
    fn tau_up(&self) -> f64 {
        self.0.tau_up_mean
    }

    #[getter]
    fn tau_down(&self) -> f64 {
        self.0.tau_down_mean
    }

    #[getter]
    fn sigma_tau(&self) -> f64 {
        self.0.sigma_tau
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    #[getter]
    fn n0(&self) -> u64 {
        self.0.n0
    }

    #[getter]
    fn bin_width(&self) -> f64 {
        self.0.bin_width
    }

    /// The opposite-chirality parameter set (channel lifetimes swapped).
    fn mirrored(&self) -> Self {
        Self(self.0.mirrored())
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "FieldGeometry", from_py_object)]
#[derive(Clone)]
struct PyFieldGeometry(core::FieldGeometry);

#[pymethods]
impl PyFieldGeometry {
    #[new]
    #[pyo3(signature = (b_gauss, theta_deg=45.0, phi_deg=0.0, chiral_axis=None))]
    fn new(b_gauss: f64, theta_deg: f64, phi_deg: f64, chiral_axis: Option<[f64; 3]>) -> PyResult<Self> {
        let g = match chiral_axis {
            Some(n) => core::FieldGeometry::new(b_gauss, theta_deg, phi_deg, n),
            None => core::FieldGeometry::with_default_axis(b_gauss, theta_deg, phi_deg),
        };
        g.map(Self).map_err(to_py)
    }

    #[getter]
    fn b_gauss(&self) -> f64 {
        self.0.magnitude()
    }

    #[getter]
    fn sin_alpha(&self) -> f64 {
        self.0.sin_alpha()
    }

    #[getter]
    fn transverse_field(&self) -> f64 {
        core::transverse_field(&self.0)
    }

    fn larmor_frequency(&self, gamma: f64) -> f64 {
        core::larmor_frequency(&self.0, gamma)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "IrfModel", from_py_object)]
#[derive(Clone)]
struct PyIrfModel(core::IrfModel);

#[pymethods]
impl PyIrfModel {
    #[new]
    #[pyo3(signature = (s=0.5, t0=5.0))]
    fn new(s: f64, t0: f64) -> PyResult<Self> {
        core::IrfModel::new(s, t0).map(Self).map_err(to_py)
    }

    /// Parses `"s,t0"`.
    #[staticmethod]
    fn parse(spec: &str) -> PyResult<Self> {
        spec.parse().map(Self).map_err(to_py)
    }

    #[getter]
    fn s(&self) -> f64 {
        self.0.s
    }

    #[getter]
    fn t0(&self) -> f64 {
        self.0.t0
    }

    fn __repr__(&self) -> String {
        format!("IrfModel(s={}, t0={})", self.0.s, self.0.t0)
    }
}

#[pyclass(name = "DecayHistogram", from_py_object)]
#[derive(Clone)]
struct PyDecayHistogram(core::DecayHistogram);

#[pymethods]
impl PyDecayHistogram {
    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        io::histogram_from_csv(text).map(Self).map_err(to_py)
    }

    fn to_csv(&self) -> String {
        io::histogram_to_csv(&self.0)
    }

    #[getter]
    fn counts(&self) -> Vec<u64> {
        self.0.counts().to_vec()
    }

    #[getter]
    fn bin_width(&self) -> f64 {
        self.0.bin_width()
    }

    #[getter]
    fn t_start(&self) -> f64 {
        self.0.t_start()
    }

    #[getter]
    fn total(&self) -> u64 {
        self.0.total()
    }

    #[getter]
    fn polarization(&self) -> String {
        self.0.meta.polarization.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.meta.seed
    }

    fn bin_centers(&self) -> Vec<f64> {
        self.0.bin_centers().collect()
    }

    fn __len__(&self) -> usize {
        self.0.n_bins()
    }
}

#[pyclass(name = "BiexpFitResult", frozen, skip_from_py_object)]
struct PyBiexpFitResult(core::BiexpFitResult);

#[pymethods]
impl PyBiexpFitResult {
    #[getter]
    fn a_long(&self) -> f64 {
        self.0.a_long
    }

    #[getter]
    fn a_short(&self) -> f64 {
        self.0.a_short
    }

    #[getter]
    fn tau1(&self) -> f64 {
        self.0.tau1
    }

    #[getter]
    fn tau2(&self) -> f64 {
        self.0.tau2
    }

    #[getter]
    fn c_offset(&self) -> f64 {
        self.0.c_offset
    }

    #[getter]
    fn tau1_err(&self) -> f64 {
        self.0.tau1_err()
    }

    #[getter]
    fn tau2_err(&self) -> f64 {
        self.0.tau2_err()
    }

    #[getter]
    fn chi2_reduced(&self) -> f64 {
        self.0.chi2_reduced
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    #[getter]
    fn covariance(&self) -> [[f64; 5]; 5] {
        self.0.covariance
    }

    fn __repr__(&self) -> String {
        let r = &self.0;
        format!(
            "BiexpFitResult(tau1={} ± {}, tau2={} ± {}, chi2_reduced={})",
            r.tau1,
            r.tau1_err(),
            r.tau2,
            r.tau2_err(),
            r.chi2_reduced
        )
    }
}

#[pyclass(name = "SweepResult", frozen, skip_from_py_object)]
struct PySweepResult(core::SweepResult);

#[pymethods]
impl PySweepResult {
    /// `(phi_deg, B_gauss, polarization, tau_long, tau_long_err, chi2_reduced, flag)` per point.
    fn records(&self) -> Vec<(f64, f64, String, f64, f64, f64, String)> {
        self.0
            .records
            .iter()
            .map(|r| {
                (
                    r.phi_deg,
                    r.b_gauss,
                    r.polarization.to_string(),
                    r.tau_long,
                    r.tau_long_err,
                    r.chi2_reduced,
                    r.status.flag().to_string(),
                )
            })
            .collect()
    }

    /// `(phi_deg, B_gauss, dtau, dtau_err)` per point with both polarizations.
    fn deltas(&self) -> Vec<(f64, f64, f64, f64)> {
        self.0.deltas.iter().map(|d| (d.phi_deg, d.b_gauss, d.dtau, d.dtau_err)).collect()
    }

    fn failures(&self) -> usize {
        self.0.failures().count()
    }

    fn first_extremum(&self, phi_deg: f64) -> PyResult<f64> {
        core::first_extremum(&self.0, phi_deg).map_err(to_py)
    }

    /// `(amplitude, phase_deg, offset, rms_residual)` of the fit over azimuth.
    fn cosine_fit(&self, b_gauss: f64) -> PyResult<(f64, f64, f64, f64)> {
        let c = core::cosine_fit(&self.0, b_gauss).map_err(to_py)?;
        Ok((c.amplitude, c.phase_deg, c.offset, c.rms_residual))
    }

    fn delta_lifetime(&self, b_gauss: f64, phi_deg: f64) -> PyResult<(f64, f64)> {
        core::delta_lifetime(&self.0, b_gauss, phi_deg).map_err(to_py)
    }
}

#[pyfunction]
fn expected_decay(params: &PySpinModelParams, geometry: &PyFieldGeometry, polarization: &str, t: f64) -> PyResult<f64> {
    let phi0 = core::initial_phase(self::polarization(polarization)?);
    Ok(core::expected_decay(&params.0, &geometry.0, phi0, t))
}

#[pyfunction]
#[pyo3(signature = (params, geometry, polarization, seed, irf=None))]
fn simulate(
    py: Python<'_>,
    params: &PySpinModelParams,
    geometry: &PyFieldGeometry,
    polarization: &str,
    seed: u64,
    irf: Option<&PyIrfModel>,
) -> PyResult<PyDecayHistogram> {
    let run = core::SimRun::new(params.0.clone(), geometry.0, self::polarization(polarization)?, seed);
    let irf = irf.map(|i| i.0);
    py.detach(|| match irf {
        Some(irf) => core::simulate_with_irf(&run, &irf),
        None => core::simulate_decay(&run),
    })
    .map(PyDecayHistogram)
    .map_err(to_py)
}

/// Noise-free expected counts per bin on the simulator grid.
#[pyfunction]
#[pyo3(signature = (params, geometry, polarization, irf=None))]
fn oracle_histogram(
    params: &PySpinModelParams,
    geometry: &PyFieldGeometry,
    polarization: &str,
    irf: Option<&PyIrfModel>,
) -> PyResult<Vec<f64>> {
    let pol = self::polarization(polarization)?;
    core::simulator::oracle_histogram(&params.0, &geometry.0, pol, irf.map(|i| &i.0))
        .map(|o| o.expected)
        .map_err(to_py)
}

fn fit_config(weighting: &str, multi_start: bool) -> PyResult<core::FitConfig> {
    let weighting = match weighting {
        "poisson" => core::Weighting::Poisson,
        "uniform" => core::Weighting::Uniform,
        other => return Err(PyValueError::new_err(format!("unknown weighting {other:?}"))),
    };
    Ok(core::FitConfig {
        weighting,
        multi_start,
        ..core::FitConfig::default()
    })
}

#[pyfunction]
#[pyo3(signature = (histogram, irf, weighting="poisson", multi_start=true))]
fn fit_biexp(
    py: Python<'_>,
    histogram: &PyDecayHistogram,
    irf: &PyIrfModel,
    weighting: &str,
    multi_start: bool,
) -> PyResult<PyBiexpFitResult> {
    let cfg = fit_config(weighting, multi_start)?;
    py.detach(|| core::fit_biexp_irf(&histogram.0, &irf.0, &cfg))
        .map(PyBiexpFitResult)
        .map_err(to_py)
}

/// Biexponential fit of raw values on a uniform grid starting at `t_start`.
#[pyfunction]
#[pyo3(signature = (values, t_start, bin_width, irf, weighting="poisson"))]
fn fit_biexp_values(
    py: Python<'_>,
    values: Vec<f64>,
    t_start: f64,
    bin_width: f64,
    irf: &PyIrfModel,
    weighting: &str,
) -> PyResult<PyBiexpFitResult> {
    let cfg = fit_config(weighting, true)?;
    py.detach(|| fit::fit_biexp_binned(&Binned::new(t_start, bin_width, values), &irf.0, &cfg))
        .map(PyBiexpFitResult)
        .map_err(to_py)
}

/// Returns `(amplitude, tau, tau_err, c_offset, chi2_reduced)`.
#[pyfunction]
#[pyo3(signature = (histogram, irf, weighting="poisson"))]
fn fit_mono(histogram: &PyDecayHistogram, irf: &PyIrfModel, weighting: &str) -> PyResult<(f64, f64, f64, f64, f64)> {
    let r = core::fit_mono_irf(&histogram.0, &irf.0, &fit_config(weighting, true)?).map_err(to_py)?;
    Ok((r.amplitude, r.tau, r.tau_err(), r.c_offset, r.chi2_reduced))
}

/// Returns `(irf, resolution_limited)`.
#[pyfunction]
fn calibrate_irf(histogram: &PyDecayHistogram) -> PyResult<(PyIrfModel, bool)> {
    let c = core::calibrate_irf(&histogram.0).map_err(to_py)?;
    Ok((PyIrfModel(c.irf), c.resolution_limited))
}

/// Model value at `t` for parameters `(a, b, tau1, tau2, c)`.
#[pyfunction]
fn model_eval(params: [f64; 5], irf: &PyIrfModel, t: f64) -> PyResult<f64> {
    core::model_eval(&core::BiexpParams::from_array(params), &irf.0, t).map_err(to_py)
}

#[pyfunction]
fn model_gradient(params: [f64; 5], irf: &PyIrfModel, t: f64) -> [f64; 5] {
    fit::model_gradient(&core::BiexpParams::from_array(params), &irf.0, t)
}

#[pyfunction]
#[pyo3(signature = (params, irf, b_values, phi_values, theta_deg=45.0, oracle=false, runs_per_point=1, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_sweep(
    py: Python<'_>,
    params: &PySpinModelParams,
    irf: &PyIrfModel,
    b_values: Vec<f64>,
    phi_values: Vec<f64>,
    theta_deg: f64,
    oracle: bool,
    runs_per_point: usize,
    seed: u64,
) -> PyResult<PySweepResult> {
    let plan = core::SweepPlan {
        b_values,
        phi_values,
        theta_deg,
        runs_per_point,
        master_seed: seed,
        mode: if oracle {
            core::SweepMode::Oracle
        } else {
            core::SweepMode::MonteCarlo
        },
        ..core::SweepPlan::default()
    };
    py.detach(|| sweep::run_sweep(&plan, &params.0, &irf.0))
        .map(PySweepResult)
        .map_err(to_py)
}

#[pymodule]
pub fn spinlife(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("SpinlifeError", py.get_type::<SpinlifeError>())?;
    m.add("StepTooCoarseError", py.get_type::<StepTooCoarseError>())?;
    m.add("IllConditionedError", py.get_type::<IllConditionedError>())?;
    m.add("NonConvergenceError", py.get_type::<NonConvergenceError>())?;
    m.add("FitFailedError", py.get_type::<FitFailedError>())?;
    m.add_class::<PySpinModelParams>()?;
    m.add_class::<PyFieldGeometry>()?;
    m.add_class::<PyIrfModel>()?;
    m.add_class::<PyDecayHistogram>()?;
    m.add_class::<PyBiexpFitResult>()?;
    m.add_class::<PySweepResult>()?;
    m.add_function(wrap_pyfunction!(expected_decay, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(fit_biexp, m)?)?;
    m.add_function(wrap_pyfunction!(fit_biexp_values, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mono, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_irf, m)?)?;
    m.add_function(wrap_pyfunction!(model_eval, m)?)?;
    m.add_function(wrap_pyfunction!(model_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
