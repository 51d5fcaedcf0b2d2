use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("coordinate {coord:?} outside extent {extent:?}")]
    Bounds { coord: [u32; 3], extent: [u32; 3] },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("field evaluated at singular time t = {0}")]
    Singularity(f64),

    #[error("non-finite state after Euler step {step}")]
    Divergence { step: usize },

    #[error("provider failed on patch ({i}, {j}): {source}")]
    Patch {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by user-supplied configuration rather than
    /// runtime failures.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Schedule(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
