use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the set on which the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("energy is infinite, gradient is undefined")]
    InfiniteEnergy,

    /// The integrand gradient is not finite somewhere on the grid.
    #[error("integrability violation: non-finite gradient entry in cell {cell}")]
    Integrability { cell: usize },

    /// A deformation sends a node outside the closure of the domain.
    #[error(
        "domain violation: node {node} maps to ({:.6}, {:.6}), {distance:.3e} outside the domain",
        point[0],
        point[1]
    )]
    DomainViolation {
        node: usize,
        point: [f64; 2],
        distance: f64,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient data: need at least {needed} positive rows, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {path:?}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
