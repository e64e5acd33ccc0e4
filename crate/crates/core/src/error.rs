use num_complex::Complex64;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite entry in {0}")]
    NonFinite(String),

    #[error("{role} is singular (condition estimate {cond:.3e})")]
    Singular { role: String, cond: f64 },

    #[error("no eigenvalue within {tol:e} of {target}; nearest is {nearest} at distance {distance:.3e}")]
    NoFixedPoint {
        target: Complex64,
        nearest: Complex64,
        distance: f64,
        tol: f64,
    },

    #[error("degenerate eigenvalues {first} and {second} both within {tol:e} of {target}")]
    Degenerate {
        target: Complex64,
        first: Complex64,
        second: Complex64,
        tol: f64,
    },

    #[error("eigensolver failed to converge on a {0}x{0} matrix")]
    NoConvergence(usize),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("step size {dt:e} too large: {reason}")]
    StepSize { dt: f64, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("divergent integral: {0}")]
    Divergent(String),

    #[error("enumeration of {count} outcome sequences exceeds limit {limit}")]
    TooLarge { count: u128, limit: u128 },

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("charge window too small: leaked trace {leaked:.3e} exceeds {limit:e}")]
    WindowTooSmall { leaked: f64, limit: f64 },

    #[error("grid mismatch: {0}")]
    Grid(String),

    #[error("cannot aggregate: {0}")]
    Aggregation(String),
}

impl Error {
    /// Numerical failures as opposed to malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Singular { .. }
                | Error::NoFixedPoint { .. }
                | Error::Degenerate { .. }
                | Error::NoConvergence(_)
                | Error::StepSize { .. }
                | Error::Divergent(_)
                | Error::TooLarge { .. }
                | Error::WindowTooSmall { .. }
        )
    }
}
