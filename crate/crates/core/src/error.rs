use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration diverged: non-finite state after {elapsed} s")]
    Divergence { elapsed: f64 },

    #[error("start state is already in the failure set")]
    StartInFailure,

    #[error("non-finite coordinate in input")]
    NonFinite,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("sets or tables are defined over different grids")]
    GridMismatch,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("kernel matrix is ill-conditioned even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("operation requires a deterministic nominal policy")]
    StochasticPolicy,

    #[error("constraint estimate has an empty state projection at batch {batch}, episode {episode}")]
    EmptyProjection { batch: usize, episode: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}
