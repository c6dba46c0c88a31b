use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite (smallest eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { min_eig: f64 },

    #[error("matrix is not Schur stable (spectral radius {radius:.6})")]
    Unstable { radius: f64 },

    #[error("iteration did not converge: {0}")]
    NoConvergence(String),

    #[error("pair (A, B) is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("dwell time exceeds limit {t_max}")]
    DwellTimeOverflow { t_max: usize },

    #[error("student-t noise needs dof >= 5 for a finite fourth moment, got {0}")]
    InvalidDof(f64),

    #[error("fallback flags are inconsistent with dwell time {dwell} at step {step}")]
    InconsistentDwell { dwell: usize, step: usize },

    #[error("certificate check failed: {0}")]
    CertificateViolated(String),

    #[error("gain difference is zero")]
    DegenerateGains,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
