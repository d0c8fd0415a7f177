use hybrid_ensemble::Error;

/// Failures surfaced by the command line, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Io(_) => 3,
            Self::Numeric(_) => 4,
            Self::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Self::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl CliError {
    /// A core error raised while reading or checking configuration.
    pub fn config(e: Error) -> Self {
        match e {
            Error::Invalid(m) => Self::Config(m),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(m) => Self::Numeric(m),
            Error::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

/// Attaches a stage name to any error convertible into [`CliError`].
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| e.into().in_stage(stage))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Data("x".into()).exit_code(), 3);
        assert_eq!(CliError::Numeric("x".into()).in_stage("fuse").exit_code(), 4);
        let e: Result<(), Error> = Err(Error::Numeric("nan".into()));
        let e = e.stage("train-base").unwrap_err();
        assert_eq!(e.exit_code(), 4);
        assert!(e.to_string().starts_with("stage train-base: numeric failure"));
    }
}
