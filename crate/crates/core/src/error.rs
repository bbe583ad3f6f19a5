use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("{phase} diverged: loss is not finite at batch {batch}")]
    Diverged { phase: &'static str, batch: usize },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("empty partition: {0}")]
    EmptyPartition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable identifier for the error line printed by the command-line tool.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Shape(_) => "shape",
            Self::NonFinite { .. } => "non_finite",
            Self::Diverged { .. } => "diverged",
            Self::Parse { .. } => "parse",
            Self::EmptyPartition(_) => "empty_partition",
            Self::Io(_) => "io",
            Self::Image(_) => "image",
        }
    }
}
