use thiserror::Error;

use crate::dynamics::Trajectory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("operation not defined for the {0} energy variant")]
    Variant(&'static str),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("vacuum: component {index} has vanishing modulus")]
    Vacuum { index: usize },

    /// The density left the admissible region and step halving could not recover.
    #[error("boundary escape at t = {time}")]
    BoundaryEscape {
        time: f64,
        partial: Option<Box<Trajectory>>,
    },

    #[error("{escaped} of {total} paths escaped the admissible region")]
    EscapeQuota { escaped: usize, total: usize },

    #[error("CFL condition violated: dt * rate = {ratio:.4} > 1")]
    Cfl { ratio: f64 },

    #[error("non-finite value in time layer {layer}")]
    NonFinite { layer: usize },
}

impl Error {
    pub(crate) fn shape(expected: usize, got: usize) -> Self {
        Error::Shape { expected, got }
    }

    /// Failures caused by the numerics rather than by invalid input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::BoundaryEscape { .. }
                | Error::EscapeQuota { .. }
                | Error::Cfl { .. }
                | Error::NonFinite { .. }
                | Error::Vacuum { .. }
        )
    }
}

pub(crate) fn check_len(v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::shape(n, v.len()));
    }
    Ok(())
}
