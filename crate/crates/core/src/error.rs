use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        /// Iterate with the smallest residual seen.
        best: Vec<f64>,
    },

    #[error("zero diagonal entry at row {row} with Jacobi preconditioning")]
    ZeroDiagonal { row: usize },

    #[error("degenerate element {element} (signed volume {volume:.3e})")]
    DegenerateElement { element: usize, volume: f64 },

    #[error("time step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value produced at time step {step}")]
    NonFinite { step: usize },

    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_step(step: usize, err: Error) -> Error {
        Error::Step {
            step,
            source: Box::new(err),
        }
    }
}
