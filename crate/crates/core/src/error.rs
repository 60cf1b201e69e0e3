use thiserror::Error;

use retarget_nn::NnError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("matrix is not a rotation (deviation {deviation:.3e})")]
    NotARotation { deviation: f64 },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("invalid motion: {0}")]
    InvalidMotion(String),
    #[error("motion has {found} joints, skeleton has {expected}")]
    JointCountMismatch { expected: usize, found: usize },
    #[error("character height must be positive, got {0}")]
    ZeroHeight(f64),
    #[error("root height must be positive, got {0}")]
    ZeroRootHeight(f64),

    #[error("BVH syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unsupported BVH channel `{name}` at line {line}")]
    UnsupportedChannel { line: usize, name: String },
    #[error("BVH declares {expected} motion values but {found} were read")]
    FrameCountMismatch { expected: usize, found: usize },
    #[error("the root joint `{0}` matches an elimination identifier")]
    RootEliminated(String),
    #[error("split ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("not a mergeable chain: {0}")]
    NotAChain(String),

    #[error("root joint `{0}` matches no torso keyword")]
    UnclassifiableRoot(String),
    #[error("body part `{0}` has no joints")]
    EmptyGroup(&'static str),
    #[error("embedding dimension must be even, got {0}")]
    OddDimension(usize),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("motion has {frames} frames, shorter than the window length {window}")]
    WindowTooShort { frames: usize, window: usize },
    #[error("motions belong to different skeletons: {0}")]
    SkeletonMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for unreadable input, 3 for configuration or
    /// skeleton mismatches, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Syntax { .. }
            | UnsupportedChannel { .. }
            | FrameCountMismatch { .. }
            | RootEliminated(_)
            | InvalidSkeleton(_)
            | InvalidMotion(_)
            | Io(_)
            | Json(_) => 2,
            DegenerateRotation(_) | NotARotation { .. } | ZeroHeight(_) | ZeroRootHeight(_) | NonFiniteLoss { .. } => 4,
            Nn(e) => match e {
                NnError::NonFiniteGradient { .. } => 4,
                NnError::Io(_) | NnError::Checkpoint(_) => 2,
                _ => 3,
            },
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
