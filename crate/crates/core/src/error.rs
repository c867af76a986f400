use thiserror::Error;

pub type Result<T, E = ImputeError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImputeError {
    #[error(
        "device {device}: timestamp {timestamp} is not after newest stored timestamp {newest}"
    )]
    Sequencing {
        device: usize,
        timestamp: i64,
        newest: i64,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("device {0} has no stored reports")]
    DeviceNotFound(usize),

    #[error("dimension {dimension} out of range for M = {dims}")]
    DimensionOutOfRange { dimension: usize, dims: usize },

    #[error("cosine similarity undefined: both vectors have zero norm on the compared dimensions")]
    UndefinedSimilarity,

    #[error("no overlapping dimensions to compare")]
    InsufficientOverlap,

    #[error("covariance matrix is singular even after regularization")]
    SingularCovariance,

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("no local data for the target dimension")]
    NoLocalData,

    #[error("weighted geometric mean domain error: value {0} is not positive")]
    Domain(f64),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("device {device} dimension {dimension}: latest report is not missing this value")]
    NotMissing { device: usize, dimension: usize },

    #[error("imputation impossible for device {device} dimension {dimension}: {reason}")]
    ImputationImpossible {
        device: usize,
        dimension: usize,
        reason: &'static str,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: duplicate report for device '{device}' at timestamp {timestamp}")]
    Duplicate {
        line: u64,
        device: String,
        timestamp: i64,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ImputeError {
    fn from(err: std::io::Error) -> Self {
        ImputeError::Io(err.to_string())
    }
}
