//! Error taxonomy shared by the library and the CLI.
//!
//! Errors fall into two classes with distinct process exit codes: configuration
//! errors (invalid parameters, malformed files, dimension mismatches — exit
//! code 2) and numerical failures (quadrature non-convergence, singular Fisher
//! terms, undefined estimators — exit code 3). Successful runs exit 0.

use thiserror::Error;

/// Exit code for configuration/usage errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violated a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A matrix dimension did not match the mode grid or file header.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A matrix file could not be parsed.
    #[error("malformed matrix file: {0}")]
    MatrixFormat(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Adaptive quadrature exhausted its subdivision budget above tolerance.
    #[error(
        "quadrature did not converge: achieved error estimate {achieved:.3e} \
         exceeds requested tolerance {requested:.3e}"
    )]
    QuadratureNonConvergence { achieved: f64, requested: f64 },

    /// A Fisher-information term had a vanishing probability but a
    /// non-negligible derivative, signalling a parameter regime the
    /// floating-point floor cannot represent.
    #[error(
        "singular Fisher term at mode index {index}: p = {p:.3e} below floor \
         but |dp/dx| = {dp:.3e} is non-negligible"
    )]
    SingularFisherTerm { index: usize, p: f64, dp: f64 },

    /// The coupling-strength calibration target cannot be reached on [0, pi].
    #[error(
        "calibration target {target:.6e} unreachable: ensemble mean off-diagonal \
         reaches only {achieved:.6e} at mu = {mu_max}"
    )]
    CalibrationUnreachable {
        target: f64,
        achieved: f64,
        mu_max: f64,
    },

    /// Maximum-likelihood estimation received an all-zero count record.
    #[error("estimator undefined: all mode counts are zero")]
    EstimatorUndefined,

    /// A Monte Carlo trial failed; carries the trial index for diagnosis.
    #[error("trial {trial}: {source}")]
    TrialFailure {
        trial: u64,
        #[source]
        source: Box<Error>,
    },

    /// Not enough data for the requested statistical operation (e.g. a
    /// scaling fit with too few points or too narrow a range).
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl Error {
    /// Process exit code for this error per the CLI contract
    /// (2 = configuration, 3 = numerical).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::DimensionMismatch(_)
            | Error::MatrixFormat(_)
            | Error::Io(_)
            | Error::InsufficientData(_) => EXIT_CONFIG,
            Error::QuadratureNonConvergence { .. }
            | Error::SingularFisherTerm { .. }
            | Error::CalibrationUnreachable { .. }
            | Error::EstimatorUndefined => EXIT_NUMERICAL,
            Error::TrialFailure { source, .. } => source.exit_code(),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
