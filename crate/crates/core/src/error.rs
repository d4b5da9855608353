use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("dimension mismatch: {vehicles} vehicles vs {slots} slots")]
    DimensionMismatch { vehicles: usize, slots: usize },

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("policy `{policy}` is not available for {scenario} scenarios")]
    UnsupportedPolicy { policy: String, scenario: String },

    #[error("{}", match .line { Some(l) => format!("config line {l}: {msg}"), None => format!("config: {msg}") })]
    InvalidConfig { line: Option<usize>, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
