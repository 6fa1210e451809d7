use std::path::PathBuf;

/// Exit code for invalid input or configuration.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit code for a stage that ran and failed.
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("stage {stage}: missing input {}", path.display())]
    MissingInput { stage: &'static str, path: PathBuf },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: ripelab_core::Error,
    },
    #[error(transparent)]
    Core(#[from] ripelab_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::MissingInput { .. } => EXIT_VALIDATION,
            CliError::Stage { source, .. } | CliError::Core(source) => {
                let missing = matches!(source, ripelab_core::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound);
                if source.is_validation() || missing {
                    EXIT_VALIDATION
                } else {
                    EXIT_STAGE
                }
            }
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageContext<T> for ripelab_core::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
