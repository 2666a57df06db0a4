use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("bad magic: expected \"GNE1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported embedding format version {0}")]
    UnsupportedVersion(u16),

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("truncated record at index {0}")]
    TruncatedRecord(u64),

    #[error("trailing bytes after {0} records")]
    TrailingBytes(u64),

    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),

    #[error("dimension mismatch for {doc_id:?}: expected {expected}, found {found}")]
    DimensionMismatch {
        doc_id: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite coordinate in {0:?}")]
    NonFinite(String),

    #[error("zero-norm embedding {0:?}")]
    ZeroNorm(String),

    #[error("empty token states")]
    EmptyTokenStates,

    #[error("pooled vector of {0:?} disagrees with pooled token states")]
    PoolingMismatch(String),

    #[error("token-mask perturbation requested but {0:?} has no token states")]
    MissingTokenStates(String),

    #[error("record count mismatch: header says {header}, got {actual}")]
    CountMismatch { header: u64, actual: u64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("corpus too small: need at least {needed} documents, have {have}")]
    CorpusTooSmall { needed: usize, have: usize },

    #[error("unknown doc_id {0:?}")]
    UnknownDocId(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config digest mismatch: calibration {calibration}, scores {scores}")]
    DigestMismatch { calibration: String, scores: String },

    #[error("missing score for doc_id {0:?}")]
    MissingScore(String),

    #[error("reports cover different corpora: {0:?} and {1:?}")]
    MixedCorpora(String, String),

    #[error("duplicate retriever_id {0:?}")]
    DuplicateRetriever(String),

    #[error("budget {budget} exceeds session count {sessions}")]
    BudgetExceedsSessions { budget: usize, sessions: usize },

    #[error("embedding service transport failure: {0}")]
    Transport(String),

    #[error("embedding service returned status {status}: {body}")]
    Service { status: u16, body: String },

    #[error("embedding dimension drifted across batches: {expected} then {found}")]
    DimensionDrift { expected: usize, found: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable snake_case name for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::Stream(_) => "io",
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::InvalidHeader(_) => "invalid_header",
            Error::TruncatedRecord(_) => "truncated_record",
            Error::TrailingBytes(_) => "trailing_bytes",
            Error::DuplicateDocId(_) => "duplicate_doc_id",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::ZeroNorm(_) => "zero_norm",
            Error::EmptyTokenStates => "empty_token_states",
            Error::PoolingMismatch(_) => "pooling_mismatch",
            Error::MissingTokenStates(_) => "missing_token_states",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Parse { .. } => "parse",
            Error::CorpusTooSmall { .. } => "corpus_too_small",
            Error::UnknownDocId(_) => "unknown_doc_id",
            Error::EmptyInput(_) => "empty_input",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::MissingScore(_) => "missing_score",
            Error::MixedCorpora(..) => "mixed_corpora",
            Error::DuplicateRetriever(_) => "duplicate_retriever",
            Error::BudgetExceedsSessions { .. } => "budget_exceeds_sessions",
            Error::Transport(_) => "transport",
            Error::Service { .. } => "service",
            Error::DimensionDrift { .. } => "dimension_drift",
            Error::Json(_) => "json",
        }
    }

    /// Transport failures may succeed on retry; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
