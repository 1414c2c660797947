use xfa_core::XfaError;

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files. Exit code 2.
    Input(anyhow::Error),
    /// Output could not be written. Exit code 2.
    Io(anyhow::Error),
    /// The computation itself failed. Exit code 3.
    Numerical(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn input(msg: impl std::fmt::Display) -> Self {
        CliError::Input(anyhow::anyhow!("{msg}"))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(e) | CliError::Io(e) | CliError::Numerical(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<XfaError> for CliError {
    fn from(err: XfaError) -> Self {
        match err {
            XfaError::InvalidHyperparameter(_) | XfaError::InvalidInput(_) | XfaError::DimensionMismatch(_) => {
                CliError::Input(err.into())
            }
            _ => CliError::Numerical(err.into()),
        }
    }
}
