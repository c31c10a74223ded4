use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("graph node {node} ({op}): {message}")]
    Graph {
        node: usize,
        op: &'static str,
        message: String,
    },

    #[error("non-finite value {value} at coordinate {coordinate}")]
    NonFiniteCoordinate { coordinate: usize, value: f64 },

    #[error("simulation failed at step {step}: {message}")]
    Simulation { step: usize, message: String },

    #[error("invalid building: {0}")]
    Building(String),

    #[error("model not fitted: {0}")]
    NotFitted(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{method}: non-finite objective at iteration {iteration}")]
    SolverNonFinite { method: String, iteration: usize },

    #[error("rank-deficient regressor matrix: {0}")]
    RankDeficient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("price data: {0}")]
    Price(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
