use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid class id {class_id} (num_classes = {num_classes})")]
    InvalidClass { class_id: usize, num_classes: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("dataset load error: {0}")]
    Load(String),

    #[error("external command `{command}` failed: {stderr}")]
    External { command: String, stderr: String },

    #[error("loss diverged to {loss} at step {step} (learning rate {lr:e})")]
    Diverged { step: usize, lr: f64, loss: f64 },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }

    /// Attach the file the error came from.
    pub fn at(self, path: impl Into<PathBuf>) -> Self {
        Error::Path { path: path.into(), source: Box::new(self) }
    }

    /// Strip any path context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Path { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
