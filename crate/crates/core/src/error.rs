use thiserror::Error;

/// Errors raised by path, funnel and selection operations.
#[derive(Debug, Error)]
pub enum FunnelError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("state coordinate {index} is not finite")]
    NonFinite { index: usize },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("time {0} is not aligned with the grid")]
    Misaligned(f64),

    #[error("splice junction mismatch at index {index}: {detail}")]
    SpliceMismatch { index: usize, detail: String },

    #[error("path count cap {cap} exceeded while expanding node {node}")]
    PathCountExceeded { cap: usize, node: String },

    #[error("inadmissible initial condition at t = {time}, x = {state:?}")]
    Inadmissible { time: f64, state: Vec<f64> },

    #[error("branch rule returned no arcs at t = {time}, x = {state:?}")]
    EmptyBranch { time: f64, state: Vec<f64> },

    #[error("arc at t = {time} does not start at its node")]
    ArcStart { time: f64 },

    #[error("horizon too short: need {needed}, path covers {available}")]
    HorizonTooShort { needed: f64, available: f64 },

    #[error("tail bound {bound:e} exceeds epsilon_tail {epsilon:e} for lambda = {lambda}")]
    TailBudget { lambda: f64, bound: f64, epsilon: f64 },

    #[error("minimization bracket failure: {0}")]
    Bracket(String),

    #[error("terminal time is infinite; reparametrization is undefined")]
    InfiniteTerminal,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FunnelError>;
