use std::path::PathBuf;

use linearize_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("state has dims {got:?}, expected {expected:?}")]
    StateDimMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("window size must be at least 1, got {0}")]
    WindowTooSmall(usize),
    #[error("head dim {0} is odd; rotary embedding needs pairs")]
    OddHeadDim(usize),
    #[error("row {row} sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("expected token at position {expected}, got {got}")]
    OutOfOrderToken { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model already has linearized attention")]
    AlreadyConverted,
    #[error("model has no linearized attention layers")]
    NotConverted,
    #[error("adapter already attached to {0}")]
    DuplicateAdapter(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownId { id: u32, vocab: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format version {found}, this build reads {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
    #[error("{layers} layers cannot be split into blocks of {block}")]
    IndivisibleBlocks { layers: usize, block: usize },
    #[error("loss diverged at step {step}")]
    DivergedLoss { step: usize },
    #[error("no LoRA adapters attached")]
    AdaptersMissing,
    #[error("prompt of {len} tokens exceeds limit {limit}")]
    PromptTooLong { len: usize, limit: usize },
    #[error("arithmetic overflow in {0}")]
    Overflow(&'static str),
    #[error("benchmark needs {needed} bytes, budget is {budget}")]
    ConfigTooLarge { needed: u64, budget: u64 },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
}

impl Error {
    pub(crate) fn shape(detail: impl Into<String>) -> Self {
        Error::ShapeMismatch(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category used by the command line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::BadConfig(_) | Error::InvalidConfig(_) | Error::IndivisibleBlocks { .. } => {
                "bad_config"
            }
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::Io { .. } => "io",
            Error::FormatVersionMismatch { .. } | Error::CorruptPayload(_) => "corrupt_checkpoint",
            Error::DivergedLoss { .. } => "diverged",
            Error::ConfigTooLarge { .. } => "too_large",
            Error::PromptTooLong { .. } | Error::UnknownId { .. } => "invalid_input",
            Error::AlreadyConverted | Error::NotConverted | Error::AdaptersMissing => {
                "wrong_stage"
            }
            _ => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "bad_config" => 2,
            "missing_checkpoint" => 3,
            "io" => 4,
            "corrupt_checkpoint" => 5,
            "invalid_input" => 6,
            "diverged" => 7,
            "too_large" => 8,
            "wrong_stage" => 9,
            _ => 1,
        }
    }
}
