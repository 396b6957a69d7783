use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid skeleton: {joints} joints (need at least {min})")]
    InvalidSkeleton { joints: usize, min: usize },

    #[error("invalid motion: {0}")]
    InvalidMotion(String),

    #[error("cannot decouple a sequence with {valid} valid frames")]
    DecoupleDegenerate { valid: usize },

    #[error("prefix of {prefix} frames exceeds {valid} valid frames")]
    PrefixTooLong { prefix: usize, valid: usize },

    #[error("model contract violated: {0}")]
    ModelContract(String),

    #[error("caption has no tokens")]
    EmptyCondition,

    #[error("adapter injection site missing: {0}")]
    InjectionSite(String),

    #[error("merge failed: {0}")]
    Merge(String),

    #[error("velocity loss needs at least 2 valid frames, got {0}")]
    VelocityDegenerate(usize),

    #[error("acceleration loss needs at least 3 valid frames, got {0}")]
    AccelerationDegenerate(usize),

    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    ContrastiveDegenerate(usize),

    #[error("foot joint set is empty")]
    FootConfig,

    #[error("feature mismatch: {0}")]
    Feature(String),

    #[error("{0} stream is empty")]
    StreamStarvation(&'static str),

    #[error("training diverged at step {step}: {what} is not finite")]
    Divergence { step: usize, what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("insufficient pool: {have} entries, need {need}")]
    InsufficientPool { have: usize, need: usize },

    #[error("feature extractor training failed: {0}")]
    ExtractorTraining(String),

    #[error("remote agent: {0}")]
    Remote(String),

    #[error("rewrite failed: {0}")]
    Rewrite(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
