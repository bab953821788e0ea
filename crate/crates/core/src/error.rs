use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {0} is not a graph leaf")]
    NotALeaf(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate gradient: standard deviation {0:e} below 1e-12")]
    DegenerateGradient(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("statistics mixing needs a batch of at least 2 samples (got {0}); use the running-statistics fallback")]
    BatchTooSmall(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("empty domain `{0}`")]
    EmptyDomain(String),
    #[error("bad file format: expected {expected}, found {found}")]
    Format { expected: String, found: String },
    #[error("checkpoint is missing `{0}`")]
    MissingParam(String),
    #[error("running source statistics are missing from the checkpoint")]
    MissingRunningStats,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
