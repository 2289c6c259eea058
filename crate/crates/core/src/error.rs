use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("entry {index} is {value}, expected 0 or 1")]
    NonBinary { index: usize, value: f64 },

    #[error("parameter outside family domain: {0}")]
    OutOfDomain(String),

    #[error("{context} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("pilot matrix is rank deficient")]
    RankDeficient,

    #[error("posterior normalizer is zero (all log-likelihoods are -inf)")]
    ZeroNormalizer,

    #[error("labels required for {0} training")]
    LabelsRequired(&'static str),

    #[error("cardinality mismatch: checkpoint has |Z|={checkpoint}, dataset has K={dataset}")]
    CardinalityMismatch { checkpoint: usize, dataset: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short stable tag used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NonBinary { .. } => "non_binary",
            Error::OutOfDomain(_) => "out_of_domain",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::RankDeficient => "rank_deficient",
            Error::ZeroNormalizer => "zero_normalizer",
            Error::LabelsRequired(_) => "labels_required",
            Error::CardinalityMismatch { .. } => "cardinality_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
