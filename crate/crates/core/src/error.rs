use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or config value violated a documented invariant.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    /// The per-step expected decay fraction exceeds the Poisson thinning guard.
    #[error(
        "time step {dt} ns too coarse: per-step decay fraction {fraction:.4} exceeds the 5% Poisson thinning guard"
    )]
    StepTooCoarse { dt: f64, fraction: f64 },

    #[error("ill-conditioned biexponential fit: {reason}")]
    IllConditioned { reason: String },

    #[error("fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("no measurement for polarization {polarization} at B = {b_gauss} G, phi = {phi_deg} deg")]
    MissingPolarization {
        polarization: crate::model::Polarization,
        b_gauss: f64,
        phi_deg: f64,
    },

    #[error("no extremum of the lifetime difference clears the 2-sigma significance gate")]
    NoSignificantExtremum,

    #[error("under-determined: need at least {needed} points, got {got}")]
    UnderDetermined { needed: usize, got: usize },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
