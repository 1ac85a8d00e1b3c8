use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] sigprop::Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// 1 for anything wrong with the request, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Run(sigprop::Error::Config(_) | sigprop::Error::Json(_)) => 1,
            CliError::Run(_) | CliError::Check(_) => 2,
        }
    }
}
