use thiserror::Error;

/// Errors produced anywhere in the tracking and fitting stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is at or behind the camera plane (depth {depth:.3e} m)")]
    BehindCamera { depth: f64 },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("insufficient history: got {got} frames, need at least {need}")]
    InsufficientHistory { got: usize, need: usize },
    #[error("non-finite measurement for keypoint {0}")]
    InvalidMeasurement(usize),
    #[error("insufficient views: got {0}, need at least 2")]
    InsufficientViews(usize),
    #[error("degenerate triangulation geometry")]
    DegenerateGeometry,
    #[error("triangulated point lies at infinity")]
    PointAtInfinity,
    #[error("triangulation failed: best hypothesis had {best} inliers, need {need}")]
    TriangulationFailed { best: usize, need: usize },
    #[error("frame alignment mismatch: {0}")]
    Alignment(String),
    #[error("optimization diverged in stage {stage} (frame {frame:?})")]
    Divergence { stage: String, frame: Option<usize> },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scene carries no ground truth")]
    NoGroundTruth,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("pipeline failure: {0}")]
    Pipeline(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Pipeline(_) | Error::Divergence { .. } | Error::TriangulationFailed { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
