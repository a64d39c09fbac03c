use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image size {size} with patch {rf} and stride {stride} does not tile exactly; nearest valid size is {suggested}")]
    Geometry {
        size: usize,
        rf: usize,
        stride: usize,
        suggested: usize,
    },

    #[error("batch norm in train mode needs at least 2 rows per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("function is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,

    #[error("location ({0}, {1}) was already visited")]
    Revisit(usize, usize),

    #[error("all {0} locations have been visited")]
    Exhausted(usize),

    #[error("duplicate location ({0}, {1})")]
    DuplicateLocation(usize, usize),

    #[error("requested {requested} glimpses but the grid only has {available} locations")]
    TooManyGlimpses { requested: usize, available: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("missing checkpoint {path}: run `{stage}` first")]
    MissingCheckpoint { path: String, stage: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
