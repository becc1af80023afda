use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: dimension mismatch, expected {expected} but found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{context}: shape mismatch, {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite objective while perturbing parameter `{parameter}`")]
    NonFiniteObjective { parameter: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("AUROC undefined: no {missing} samples present")]
    SingleClass { missing: &'static str },

    #[error("AUPRO undefined: ground truth contains no anomalous regions")]
    NoRegions,

    #[error("anomaly blob did not fit inside the valid area after {tries} tries")]
    BlobPlacement { tries: usize },

    #[error("training batch contains anomalous sample `{0}`; training is nominal-only")]
    AnomalousTrainingSample(String),

    #[error("class `{0}` has no prompts in this model")]
    UnknownClass(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
