use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing covariate `{0}`")]
    MissingCovariate(String),

    #[error("unknown level `{value}` for covariate `{name}`")]
    UnknownLevel { name: String, value: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("too few groups: {0} (need at least 2)")]
    TooFewGroups(usize),

    #[error("matrix is not symmetric")]
    AsymmetricInput,

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("covariance still singular after ridge escalation to lambda = {lambda}")]
    SingularAfterEscalation { lambda: f64 },

    #[error("matrix is not positive definite: {0}")]
    NonPositiveDefinite(String),

    #[error("non-positive variance at coefficient {0}")]
    NonPositiveVariance(usize),

    #[error("standard error must be positive, got {0}")]
    NonPositiveStdError(f64),

    #[error("unknown predictor `{0}`")]
    UnknownPredictor(String),

    #[error("empty input")]
    EmptyInput,

    #[error("no attempts on day {0}")]
    NoAttemptsThatDay(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("intercept calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("prior covariance is not positive definite")]
    NonPositiveDefinitePrior,

    #[error("schema fingerprint mismatch: expected {expected}, found {found}")]
    SchemaFingerprintMismatch { expected: String, found: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(line: u64, column: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column,
            message: message.into(),
        }
    }
}
