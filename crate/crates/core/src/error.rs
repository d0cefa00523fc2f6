use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("bad magic {0:02x?}, expected \"SLTR\"")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u16),

    #[error("tensor rank {0} outside 1..=4")]
    BadRank(usize),

    #[error("truncated tensor payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("input has zero variance")]
    ZeroVariance,

    #[error("invalid cluster count: {0}")]
    InvalidK(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("no attention labels supplied")]
    NoLabels,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("screening retained no instances")]
    EmptyScreen,

    #[error("budget {budget} exceeds the {available} available instances")]
    BudgetTooLarge { budget: usize, available: usize },

    #[error("training diverged at step {step} (loss is not finite)")]
    Divergence { step: usize },

    #[error("training subset contains only class {0}")]
    SingleClass(usize),
}
