use thiserror::Error;
use vqsc_tensor::TensorError;

#[derive(Debug, Error)]
pub enum VqscError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("channel error: {0}")]
    Channel(String),

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("codebook index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl VqscError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        VqscError::Io {
            path: path.into(),
            source,
        }
    }
}
