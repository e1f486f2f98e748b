use thiserror::Error;

/// Errors produced by the geometry engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("vector is not tangent at the base point (defect {defect:.3e})")]
    NotTangent { defect: f64 },

    #[error("vector is not unit length (norm^2 = {norm_sq:.6})")]
    NotUnit { norm_sq: f64 },

    #[error("point violates the model constraint (defect {defect:.3e})")]
    OffModel { defect: f64 },

    #[error("parameter point {param:?} lies outside the evaluation box")]
    OutsideBox { param: Vec<f64> },

    #[error("immersion condition fails at {param:?}: rank {rank} < {expected}")]
    NotImmersive {
        param: Vec<f64>,
        rank: usize,
        expected: usize,
    },

    #[error("matrix A^3 does not vanish (max entry {max_entry:.3e})")]
    NotNilpotent { max_entry: f64 },

    #[error("no catalog entry named `{0}`")]
    UnknownManifold(String),

    #[error("degenerate first fundamental form (condition number {condition:.3e})")]
    DegenerateMetric { condition: f64 },

    #[error("the normal space is empty")]
    EmptyNormalSpace,

    #[error("operation requires {0}")]
    Unsupported(String),

    #[error("index of nullity jumps from {from} to {to} near {param:?}")]
    NullityJump {
        param: Vec<f64>,
        from: usize,
        to: usize,
    },

    #[error("ambiguous kernel at {param:?} (gap {gap:.3e})")]
    AmbiguousKernel { param: Vec<f64>, gap: f64 },

    #[error("frame continuation failed: {0}")]
    FrameContinuation(String),

    #[error("nearest-point projection diverged: {0}")]
    ProjectionDiverged(String),

    #[error("start point is not on the leaf through the base point (residual {residual:.3e})")]
    NotOnLeaf { residual: f64 },

    #[error("the nullity distribution has no transverse directions")]
    NoTransverseDirections,

    #[error("horizontality residual blew up ({residual:.3e}); step too coarse")]
    ResidualBlowup { residual: f64 },

    #[error("all {0} sampled loops failed to lift")]
    AllLoopsFailed(usize),

    #[error("need at least {needed} holonomy elements, got {got}")]
    TooFewElements { needed: usize, got: usize },

    #[error("tube radius {eps} exceeds the focal bound {bound:.6}")]
    FocalBound { eps: f64, bound: f64 },

    #[error("ambiguous eigenvalue cluster near {near} (eigenvalue {value:.3e})")]
    AmbiguousEigenvalues { near: f64, value: f64 },

    #[error("unstable subspace estimate (singular-value gap {gap:.3e})")]
    UnstableEstimate { gap: f64 },

    #[error("expression error: {0}")]
    Expression(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
