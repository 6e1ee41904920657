use thiserror::Error;

/// Errors raised while building, validating or solving a traffic problem.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input. `path` names the offending field (e.g. `network.edges[2]`).
    #[error("invalid {path}: {message}")]
    Validation { path: String, message: String },

    /// A modelling assumption was broken, e.g. an interaction radius that
    /// reaches past the shortest edge.
    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("CFL violated on edge {edge}: courant number {courant} > {limit}; reduce the time step")]
    Cfl { edge: usize, courant: f64, limit: f64 },

    #[error("non-finite value at t = {time} on edge {edge}, cell {cell}")]
    NonFinite { time: f64, edge: usize, cell: usize },

    #[error("traffic-light signals conflict on [{start}, {end}): {message}")]
    SignalConflict { start: f64, end: f64, message: String },

    #[error("forward history incomplete: {0}; re-run the forward solve with full recording")]
    MissingHistory(String),

    #[error("not supported: {0}")]
    Unsupported(String),

    #[error("division guard: {0}")]
    DivisionGuard(String),

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
