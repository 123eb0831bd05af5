use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad spec file, flag or parameter.
    #[error("{0}")]
    Input(String),
    /// Non-convergence, factorization or resolution failure.
    #[error("{0}")]
    Numerical(String),
    /// A self-check on the computed results failed.
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Invariant(_) => 3,
        })
    }
}

impl From<hbm_core::Error> for CliError {
    fn from(e: hbm_core::Error) -> Self {
        use hbm_core::Error as E;
        match &e {
            E::UnderResolved { .. } => CliError::Numerical(format!("{e}; increase --resolution")),
            E::Factorization { degree } => CliError::Numerical(format!(
                "{e}; lower --degree below {degree} or increase --resolution"
            )),
            E::BasisExceedsGrid { needed, .. } => CliError::Input(format!(
                "{e}; use a --resolution whose grid degree is at least {needed} or lower --degree"
            )),
            _ if e.is_numerical() => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(format!("i/o error: {e}"))
    }
}
