use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{op} has no second-order rule")]
    UnsupportedSecondOrder { op: &'static str },

    #[error("backward called on a tape with no recorded operations")]
    EmptyTape,

    #[error("backward output is not recorded on this tape")]
    NotOnTape,

    #[error("tensors belong to different tapes")]
    TapeMismatch,

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("backward through a gradient requires a tape built in second-order mode")]
    NotSecondOrder,

    #[error("eval-mode batch normalization before any running statistics were accumulated")]
    UninitializedRunningStats,

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("every sampled input had a zero loss gradient; similarity is undefined")]
    AllGradientsZero,

    #[error("parse error in {what} at byte {offset}: {detail}")]
    Parse {
        what: String,
        offset: u64,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("{context}: {source}")]
    Run {
        context: String,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 1 for configuration mistakes, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Config(_) => 1,
            Error::Run { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    /// Wrap with a description of the run that failed.
    pub fn in_run(self, context: impl Into<String>) -> Error {
        Error::Run { context: context.into(), source: Box::new(self) }
    }
}
