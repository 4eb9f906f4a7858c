use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("timestep {t} outside horizon {horizon}")]
    Range { t: usize, horizon: usize },
    #[error("rollout diverged at timestep {t}")]
    Divergence { t: usize },
    #[error("matrix is not positive definite{}", stage.map(|t| format!(" at stage {t}")).unwrap_or_default())]
    NotPositiveDefinite { stage: Option<usize> },
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Self::dim(what, expected, got))
        }
    }
}
