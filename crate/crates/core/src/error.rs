use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed row {row}: {message}")]
    MalformedRow { row: u64, message: String },

    #[error("essay {essay_id}: score {score} for trait `{trait_name}` outside [{min}, {max}]")]
    ScoreOutOfRange {
        essay_id: String,
        trait_name: String,
        score: i64,
        min: i64,
        max: i64,
    },

    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("essay {0} has no gold scores")]
    Unlabeled(String),

    #[error("insufficient labeled pool for prompt {prompt}: required {required}, available {available}")]
    InsufficientPool {
        prompt: String,
        required: usize,
        available: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("value {value} outside range [{min}, {max}]")]
    ValueOutOfRange { value: i64, min: i64, max: i64 },

    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("trait set mismatch: {0}")]
    TraitMismatch(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("base model is not trained; run stage-1 training before adapter fine-tuning")]
    BaseNotTrained,

    #[error("report key mismatch: {0}")]
    KeyMismatch(String),

    #[error("pseudo-labeled essay {0} overlaps the labeled data")]
    PseudoLabelOverlap(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
