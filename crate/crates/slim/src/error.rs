use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact {}: run the `{stage}` stage first", path.display())]
    Missing { stage: &'static str, path: PathBuf },

    #[error(transparent)]
    Core(#[from] slim_core::Error),

    #[error(transparent)]
    Session(Box<crate::session::SessionError>),
}

impl From<crate::session::SessionError> for Error {
    fn from(e: crate::session::SessionError) -> Self {
        match e {
            crate::session::SessionError::Store(inner) => inner,
            other => Self::Session(Box::new(other)),
        }
    }
}

impl Error {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), message: message.into() }
    }

    /// Process exit code: 2 configuration, 3 missing artifact, 4 numeric
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use slim_core::Error as C;
        match self {
            Self::Config(_) => 2,
            Self::Missing { .. } => 3,
            Self::Core(C::InvalidParameter(_) | C::InvalidK(_) | C::BudgetTooLarge { .. }) => 2,
            Self::Core(
                C::ZeroVariance
                | C::TooFewPoints { .. }
                | C::EmptyScreen
                | C::Divergence { .. }
                | C::SingleClass(_)
                | C::NonFinite(_),
            ) => 4,
            _ => 1,
        }
    }

    /// The stage whose output is missing, if that is the problem.
    pub fn missing_stage(&self) -> Option<&'static str> {
        match self {
            Self::Missing { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
