use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by node {node} ({op})")]
    NonFiniteValue { node: usize, op: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported task: {0}")]
    UnsupportedTask(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),

    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("no weight for task {task_id} instance {instance}")]
    WeightLookup { task_id: usize, instance: usize },

    #[error("hypergradient has {got} entries, weight matrix has {expected}")]
    Alignment { expected: usize, got: usize },

    #[error("diverged at iteration {iter}: loss {loss}")]
    Divergence { iter: usize, loss: f64 },

    #[error("malformed record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }
}
