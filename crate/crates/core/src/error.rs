use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("kernel with beta = 0 is singular and has no factor")]
    SingularKernel,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("simulation diverged at node {node} (t = {time})")]
    SimulationDiverged { node: usize, time: usize },

    #[error("random system generation failed after {attempts} attempts")]
    GenerationFailed { attempts: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("marginal likelihood decreased at EM iteration {iteration}: {previous} -> {current}")]
    MonotonicityViolation {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("node {node}: {source}")]
    Node {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("too many failed trials: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_node(self, node: usize) -> Self {
        Error::Node {
            node,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
