use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer `{layer}`: {source}")]
    Layer { layer: String, source: Box<Error> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite values encountered in {0}")]
    NonFinite(String),

    #[error("layer `{0}` has zero variance after centering")]
    DegenerateActivation(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn in_layer(layer: &str) -> impl FnOnce(Error) -> Error + '_ {
        move |source| Error::Layer {
            layer: layer.to_string(),
            source: Box::new(source),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
