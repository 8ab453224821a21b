use std::path::PathBuf;

/// Errors raised across the verification pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("genotype value {value:?} at sample {sample}, snp {snp} is not in {{0,1,2}}")]
    GenotypeDomain { sample: String, snp: String, value: String },
    #[error("dataset has no {0} samples")]
    EmptyGroup(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible synthesis config: {0}")]
    Infeasible(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("degenerate contingency table: {0}")]
    DegenerateTable(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("unknown snp id {0:?}")]
    UnknownSnp(String),
    #[error("non-positive privacy parameter {0}")]
    NonPositiveEpsilon(f64),
    #[error("randomized response is unidentifiable (p_keep == q_flip)")]
    Unidentifiable,
    #[error("undefined deviation: {0}")]
    UndefinedDeviation(String),
    #[error("undefined relative change: expected deviation is zero")]
    UndefinedPhi,
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("not enough independent snps: need {needed}, found {found}")]
    InsufficientSnps { needed: usize, found: usize },
    #[error("calibration mismatch: {0}")]
    CalibrationMismatch(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short code used by the CLI when reporting failures.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
            Error::GenotypeDomain { .. } => "E_DOMAIN",
            Error::EmptyGroup(_) => "E_EMPTY_GROUP",
            Error::Config(_) => "E_CONFIG",
            Error::Infeasible(_) => "E_INFEASIBLE",
            Error::LengthMismatch { .. } => "E_LENGTH",
            Error::Empty(_) => "E_EMPTY",
            Error::DegenerateTable(_) => "E_DEGENERATE",
            Error::OutOfRange(_) => "E_RANGE",
            Error::UnknownSnp(_) => "E_UNKNOWN_SNP",
            Error::NonPositiveEpsilon(_) => "E_EPSILON",
            Error::Unidentifiable => "E_UNIDENTIFIABLE",
            Error::UndefinedDeviation(_) => "E_UNDEFINED_DEVIATION",
            Error::UndefinedPhi => "E_UNDEFINED_PHI",
            Error::Calibration(_) => "E_CALIBRATION",
            Error::InsufficientSnps { .. } => "E_INSUFFICIENT_SNPS",
            Error::CalibrationMismatch(_) => "E_CALIBRATION_MISMATCH",
            Error::Serde(_) => "E_SERDE",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
