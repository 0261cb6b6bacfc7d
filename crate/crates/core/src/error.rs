use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("objective evaluated to a non-finite value")]
    NonFinite,
    #[error("insufficient tissue: {found} pixels pass the optical density threshold, need {required}")]
    InsufficientTissue { found: usize, required: usize },
    #[error("degenerate stain plane: optical densities span fewer than two independent directions")]
    DegenerateStainPlane,
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("frozen parameters changed during training (checksum {expected:#018x} became {found:#018x})")]
    FreezeViolation { expected: u64, found: u64 },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
