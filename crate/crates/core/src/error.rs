use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("unknown family `{0}`")]
    UnknownFamily(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("support exceeds margin: {0}")]
    SupportExceedsMargin(String),
    #[error("derivative order {0} exceeds 6")]
    OrderTooHigh(usize),
    #[error("scale {0} outside (0, 1]")]
    ScaleOutOfRange(f64),
    #[error("support of radius {0} overflows the margin after convolution")]
    SupportOverflow(f64),
    #[error("ball outside the domain")]
    BallOutsideDomain,
    #[error("empty scale set")]
    EmptyScaleSet,
    #[error("empty dictionary")]
    EmptyDictionary,
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("ill-conditioned gram matrix (condition {0:.3e})")]
    IllConditioned(f64),
    #[error("moment correction failed for order {0}")]
    MomentCorrectionFailed(usize),
    #[error("ladder diverged: {0}")]
    LadderDiverged(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("support outside the operator domain ball")]
    SupportOutsideDomainBall,
    #[error("operator is not elliptic (min singular value {0:.3e})")]
    NotElliptic(f64),
    #[error("box too small: {0}")]
    BoxTooSmall(String),
    #[error("kernel projection needs constant coefficients")]
    ProjectionUnavailable,
    #[error("kernel constraint violated: |A*v|/|v| = {0:.3e}")]
    KernelConstraintViolated(f64),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
