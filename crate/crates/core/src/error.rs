use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("matrix is not skew-symmetric (symmetric part norm {0:e})")]
    NotSkew(f64),

    #[error("matrix is not a rotation (orthonormality error {orthonormality:e}, det {det})")]
    NotRotation { orthonormality: f64, det: f64 },

    #[error("Euler-rate Jacobian singular: |pitch| = {pitch} too close to pi/2")]
    EulerSingularity { pitch: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("allocation did not converge after {iterations} iterations (last step {last_step:e})")]
    AllocationNonConvergence {
        iterations: usize,
        last_step: f64,
        last_iterate: [f64; 4],
    },

    #[error("Riccati integration diverged at t = {time}")]
    RiccatiDivergence { time: f64 },

    #[error("time {t} outside schedule range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("algebraic Riccati equation failed: {0}")]
    Are(String),

    #[error("arcsin argument {0} outside [-1, 1]")]
    ArcsinDomain(f64),

    #[error("rotation error near antipodal configuration (trace + 1 = {0:e})")]
    Antipodal(f64),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("step {step} (t = {time}): {source}")]
    Step {
        step: usize,
        time: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    /// Underlying cause, looking through step context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn at_step(self, step: usize, time: f64) -> Self {
        Error::Step {
            step,
            time,
            source: Box::new(self),
        }
    }
}
