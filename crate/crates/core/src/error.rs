use thiserror::Error;

/// Errors raised anywhere in the fitting and robustness pipeline.
///
/// The variant name doubles as the stable error identifier reported by the
/// CLI and the C interface.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("parameters outside the family domain: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("optimizer step left the feasible region and backtracking failed: {0}")]
    DomainViolation(String),
    #[error("linear response system is numerically singular (condition number {condition:e})")]
    SingularSystem { condition: f64 },
    #[error("prior is not differentiable in the requested direction: {0}")]
    NonDifferentiablePrior(String),
    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),
    #[error("prior density at the contamination point underflows (log density {log_density})")]
    ZeroPriorDensity { log_density: f64 },
    #[error("normalizer of the extremal perturbation is not finite: {0}")]
    NormalizationFailure(String),
    #[error("model is not in the conjugate family: {0}")]
    NotConjugate(String),
    #[error("degenerate Markov chain: acceptance rate {rate:.4}")]
    DegenerateChain { rate: f64 },
    #[error("prior does not factorize across block {0}")]
    NotFactorized(usize),
    #[error("zero posterior variance for quantity {0}")]
    ZeroVariance(String),
    #[error("unknown hyperparameter `{name}`; valid keys: {valid}")]
    UnknownHyperparameter { name: String, valid: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable name of the variant, used in CLI diagnostics and FFI messages.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Domain(_) => "DomainError",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::DomainViolation(_) => "DomainViolation",
            Error::SingularSystem { .. } => "SingularSystem",
            Error::NonDifferentiablePrior(_) => "NonDifferentiablePrior",
            Error::QuadratureFailure(_) => "QuadratureFailure",
            Error::ZeroPriorDensity { .. } => "ZeroPriorDensity",
            Error::NormalizationFailure(_) => "NormalizationFailure",
            Error::NotConjugate(_) => "NotConjugate",
            Error::DegenerateChain { .. } => "DegenerateChain",
            Error::NotFactorized(_) => "NotFactorized",
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::UnknownHyperparameter { .. } => "UnknownHyperparameter",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Io(_) => "IoError",
        }
    }

    /// Whether the error comes from user input rather than from numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnknownHyperparameter { .. }
                | Error::InvalidInput(_)
                | Error::Io(_)
                | Error::DimensionMismatch { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::InvalidInput(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
