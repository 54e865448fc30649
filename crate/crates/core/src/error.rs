use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("covariance of component {component} is not positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("mixture fitting failed: {0}")]
    Fitting(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    NothingToDo(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerical kernels (integration, factorization, fitting).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::Integration { .. } | Error::NotPositiveDefinite { .. } | Error::Fitting(_)
        )
    }

    /// Process exit status for this error: 2 configuration, 3 numerical or
    /// argument failure, 4 nothing to do, 1 I/O and serialization.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 2,
            Error::NothingToDo(_) => 4,
            Error::Io(_) | Error::Json(_) => 1,
            _ => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_root_cause() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Fitting("x".into()).in_stage("fit").exit_code(), 3);
        assert_eq!(Error::NothingToDo("x".into()).exit_code(), 4);
        let io = Error::Io(std::io::Error::other("x"));
        assert_eq!(io.in_stage("write").exit_code(), 1);
        assert!(Error::Integration {
            t: 0.0,
            reason: "x".into()
        }
        .is_numerical());
    }
}
