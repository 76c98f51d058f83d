use std::fmt;

use serde::{Deserialize, Serialize};

/// A single broken invariant of a configuration, tagged with the field it lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn join(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model: {}", join(.0))]
    InvalidModel(Vec<Violation>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("instance too large: {count:e} candidates exceeds the limit of {limit:e}")]
    InstanceTooLarge { count: f64, limit: f64 },

    #[error("singular linear system while solving for a stationary distribution")]
    SingularSystem,

    #[error("channel transition matrix is reducible: channels {unreachable:?} are not reachable from channel 0")]
    ReducibleChannel { unreachable: Vec<usize> },

    #[error("did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Whether the root cause is numerical non-convergence.
    pub fn is_not_converged(&self) -> bool {
        match self {
            Error::NotConverged { .. } => true,
            Error::Client { source, .. } => source.is_not_converged(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
