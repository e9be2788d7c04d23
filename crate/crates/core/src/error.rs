use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A plane passes within the minimum CP norm of the frame origin.
    #[error("plane too close to the frame origin: |cp| = {norm:.6} m")]
    SingularPlane { norm: f64 },

    #[error("insufficient correspondences: {found} matched, {required} required")]
    InsufficientCorrespondences { found: usize, required: usize },

    #[error("normal estimation failed for {failed} of {total} correspondences")]
    DegenerateNormals { failed: usize, total: usize },

    #[error("plane hypothesis samples are all collinear")]
    DegenerateCandidates,

    #[error("only {found} ground candidates, {required} required")]
    NoGroundCandidates { found: usize, required: usize },

    #[error("ground is not planar: {support} of {candidates} candidates fit one plane")]
    NonPlanarGround { support: usize, candidates: usize },

    #[error("plane refinement did not converge: |dPi| = {step:.3e} after {iterations} iterations")]
    NonConvergence { iterations: usize, step: f64 },

    #[error("innovation covariance is not positive definite")]
    NonInvertibleCovariance,

    #[error("pose graph normal matrix is rank deficient (min/max eigenvalue {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("time {t} outside trajectory span [{start}, {end}]")]
    OutOfSpan { t: f64, start: f64, end: f64 },

    #[error("trajectories share fewer than two associable timestamps")]
    NoOverlap,

    #[error("registration failed at frame {frame}: {source}")]
    RegistrationFailure {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("key-frame {keyframe}: {source}")]
    KeyFrame {
        keyframe: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
