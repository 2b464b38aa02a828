use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Run(#[from] otda_core::Error),
    #[error("check `{kind}` failed: {failed} of {total} checks over threshold")]
    CheckFailed { kind: String, failed: usize, total: usize },
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config { path: path.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Run(_) => 1,
            CliError::Io { .. } => 2,
            CliError::CheckFailed { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::config("seeds", "empty").exit_code(), 1);
        assert_eq!(CliError::io("x", std::io::Error::other("denied")).exit_code(), 2);
        assert_eq!(CliError::CheckFailed { kind: "prop1".into(), failed: 1, total: 5 }.exit_code(), 3);
        assert_eq!(CliError::from(otda_core::Error::InvalidArgument("m".into())).exit_code(), 1);
    }
}
