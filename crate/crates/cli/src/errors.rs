//! CLI error taxonomy and exit codes.

use std::path::PathBuf;

use thiserror::Error;

/// Exit code classes: 1 configuration, 2 format/IO, 3 numeric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Format,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Format => 2,
            ErrorKind::Numeric => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Format => "format",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CliError::Config(_) => ErrorKind::Config,
            CliError::Format(_) | CliError::Io { .. } => ErrorKind::Format,
            CliError::Numeric(_) => ErrorKind::Numeric,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<mmfusion_core::Error> for CliError {
    fn from(e: mmfusion_core::Error) -> Self {
        use mmfusion_core::Error as E;
        match e {
            E::Numeric(_) | E::Training { .. } | E::Oracle(_) => CliError::Numeric(e.to_string()),
            E::Config(_) | E::Shape { .. } | E::Domain(_) | E::Lookup { .. } => {
                CliError::Config(e.to_string())
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// One machine-parseable line on stderr, then the class exit code.
pub fn report_and_exit(err: CliError) -> ! {
    let kind = err.kind();
    eprintln!("mmfusion: error: kind={} detail={:?}", kind.as_str(), err.to_string());
    std::process::exit(kind.exit_code())
}
