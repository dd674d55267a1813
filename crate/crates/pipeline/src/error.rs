use thiserror::Error;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),

    #[error("phase `{phase}` needs `{missing}`; run `{producer}` first")]
    PhaseOrder { phase: &'static str, missing: String, producer: &'static str },

    #[error("{path}: {reason}")]
    Io { path: String, reason: String },

    #[error(transparent)]
    Core(#[from] scenekd_core::Error),
}

impl PipelineError {
    pub fn io(path: impl AsRef<std::path::Path>, reason: impl std::fmt::Display) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), reason: reason.to_string() }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        use scenekd_core::Error as E;
        match self {
            Self::Config(_) | Self::Core(E::Config { .. }) => 2,
            Self::PhaseOrder { .. } => 3,
            Self::Io { .. } | Self::Core(E::Io { .. }) | Self::Core(E::Format(_)) => 4,
            Self::Core(_) => 1,
        }
    }
}
