use std::process::ExitCode;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config file, flag or input file; exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl From<fusedmpc::Error> for CliError {
    fn from(e: fusedmpc::Error) -> Self {
        match e {
            fusedmpc::Error::Config(_) | fusedmpc::Error::Dimension { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<fusedmpc_rl::Error> for CliError {
    fn from(e: fusedmpc_rl::Error) -> Self {
        use fusedmpc_rl::Error as E;
        match e {
            E::Solver(inner) => inner.into(),
            E::Config(_) | E::Track(_) | E::Checkpoint(_) | E::Dimension { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o: {e}"))
    }
}
