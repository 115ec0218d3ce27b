use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("dropout probability must lie in [0, 1), got {0}")]
    Probability(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("invalid morphology: {0}")]
    Morphology(String),

    #[error("invalid architecture spec: {0}")]
    Spec(String),

    #[error("limb count mismatch: expected {expected}, got {got}")]
    LimbCount { expected: usize, got: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown morphology id `{0}`")]
    UnknownMorphology(String),

    #[error("non-finite loss at epoch {epoch}, minibatch {minibatch}")]
    NonFiniteLoss { epoch: usize, minibatch: usize },

    #[error("fit diverged for robot `{robot}`: {msg}")]
    FitDiverged { robot: String, msg: String },

    #[error("report error: {0}")]
    Report(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numerical failures map to a distinct process exit code in the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Optimizer(_)
                | Error::NonFiniteLoss { .. }
                | Error::FitDiverged { .. }
        )
    }
}
