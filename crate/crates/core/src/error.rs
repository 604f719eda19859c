use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("all pixels ignored")]
    AllIgnored,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("no labeled positions at this scale")]
    EmptyPool,

    #[error("a_max ({a_max}) is smaller than the number of present classes ({classes})")]
    AnchorCapTooSmall { a_max: usize, classes: usize },

    #[error("no positive pairs")]
    NoPositivePairs,

    #[error("no cross-scale positives")]
    NoCrossScalePositives,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag used by the CLI and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::AllIgnored => "all_ignored",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::TapeConsumed => "tape_consumed",
            Error::EmptyPool => "empty_pool",
            Error::AnchorCapTooSmall { .. } => "anchor_cap_too_small",
            Error::NoPositivePairs => "no_positive_pairs",
            Error::NoCrossScalePositives => "no_cross_scale_positives",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
