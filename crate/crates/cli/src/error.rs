use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    MissingFile(PathBuf),
    Diverged(String),
    Input(String),
    Failed(String),
}

impl CliError {
    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Failed(format!("{}: {e}", path.display()))
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 3,
            CliError::MissingFile(_) => 4,
            CliError::Diverged(_) => 5,
            CliError::Input(_) => 6,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::MissingFile(p) => write!(f, "missing file: {}", p.display()),
            CliError::Diverged(m) => write!(f, "registration diverged: {m}"),
            CliError::Input(m) => write!(f, "invalid input: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<cortexmorph::Error> for CliError {
    fn from(e: cortexmorph::Error) -> Self {
        use cortexmorph::Error as E;
        match e {
            E::Diverged { .. } => CliError::Diverged(e.to_string()),
            E::Io {
                ref path,
                ref source,
            } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingFile(path.clone())
            }
            E::Io { .. } => CliError::Failed(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(format!("csv: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
