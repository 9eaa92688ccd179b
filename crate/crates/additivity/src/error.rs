//! Crate-wide error type.

use crate::glm::ConvergenceFailure;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A table, record set, or generator input violates an invariant.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A model specification combines link/distribution/estimation illegally.
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    /// CSV input could not be parsed into the expected schema.
    #[error("csv: {0}")]
    Csv(String),

    /// An exposure pattern carries no observations, so the saturated design
    /// cannot be fit.
    #[error("singular design: cell (x={x}, z={z}) has no observations")]
    SingularDesign { x: u8, z: u8 },

    /// The information matrix could not be inverted; names the cell whose
    /// weight contribution is smallest.
    #[error("singular information matrix near cell (x={x}, z={z})")]
    SingularInformation { x: u8, z: u8 },

    /// Iterative fitting failed; carries the typed reason and last state.
    #[error("fit did not converge: {0}")]
    Convergence(#[from] ConvergenceFailure),

    /// RERI from raw proportions needs a nonzero reference-cell risk.
    #[error("reference risk zero: cell (x=0, z=0) has no events")]
    ReferenceRiskZero,

    /// An operation that is only defined for a particular link was asked to
    /// run on a fit with a different one.
    #[error("{operation} requires a {required} fit, got {actual}")]
    WrongLink {
        operation: &'static str,
        required: &'static str,
        actual: &'static str,
    },

    /// More than 20% of bootstrap replicates failed; partial results attached.
    #[error("bootstrap failure rate too high: {failed} of {requested} replicates failed")]
    BootstrapFailureRate {
        failed: usize,
        requested: usize,
        partial: Box<crate::bootstrap::BootstrapResult>,
    },

    #[error("empty input")]
    EmptyInput,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code under the CLI contract: 2 for usage/validation
    /// problems, 3 for numerical or convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidData(_)
            | Error::InvalidSpec(_)
            | Error::Csv(_)
            | Error::EmptyInput
            | Error::Io(_) => 2,
            Error::SingularDesign { .. }
            | Error::SingularInformation { .. }
            | Error::Convergence(_)
            | Error::ReferenceRiskZero
            | Error::WrongLink { .. }
            | Error::BootstrapFailureRate { .. } => 3,
        }
    }
}
