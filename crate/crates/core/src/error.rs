use thiserror::Error;

/// Shape of a matrix as `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left {left:?}, right {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("zero-norm vector passed to {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("attempt to modify frozen {0}")]
    Frozen(&'static str),

    #[error("{0} must be frozen first")]
    NotFrozen(&'static str),

    #[error("no center for class {0}")]
    MissingCenter(usize),

    #[error("class {0} already present in the prototype store")]
    DuplicateClass(usize),

    #[error("task {0} already has an adapter")]
    DuplicateTask(usize),

    #[error("no adapter registered for task {0}")]
    MissingAdapter(usize),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("class {0} overlaps between pretraining and incremental tasks")]
    ClassOverlap(usize),

    #[error("class {0} has not been seen at this stage")]
    UnseenClass(usize),

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("cannot split {classes} classes as base {base} + k x {inc}")]
    Split {
        classes: usize,
        base: usize,
        inc: usize,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(op: &'static str, left: Shape, right: Shape) -> Self {
        Error::DimensionMismatch { op, left, right }
    }

    /// Short machine-readable tag, used by the CLI for single-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ZeroNorm(_) => "zero_norm",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Frozen(_) => "frozen",
            Error::NotFrozen(_) => "not_frozen",
            Error::MissingCenter(_) => "missing_center",
            Error::DuplicateClass(_) => "duplicate_class",
            Error::DuplicateTask(_) => "duplicate_task",
            Error::MissingAdapter(_) => "missing_adapter",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::ClassOverlap(_) => "class_overlap",
            Error::UnseenClass(_) => "unseen_class",
            Error::InfeasibleGeometry(_) => "infeasible_geometry",
            Error::Split { .. } => "split",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Stage { source, .. } => source.kind(),
            Error::Invariant(_) => "invariant",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
