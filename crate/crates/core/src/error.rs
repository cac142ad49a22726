use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("reference signal has zero spectral energy; spectral convergence is undefined")]
    DegenerateReference,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("missing upstream artifact {path}: run `{stage}` first")]
    MissingStage { path: String, stage: String },

    #[error("decoding produced no tokens")]
    EmptyDecodeOutput,

    #[error("symbol {symbol} outside the base alphabet of size {alphabet}")]
    OutOfAlphabet { symbol: usize, alphabet: usize },

    #[error("invalid subword unit id {id} (vocab has {vocab} units)")]
    InvalidUnitId { id: usize, vocab: usize },

    #[error("vocab size {requested} is smaller than the base alphabet {base}")]
    VocabTooSmall { requested: usize, base: usize },

    #[error("empty reference sequence")]
    EmptyReference,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
