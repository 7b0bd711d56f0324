use std::fmt;

/// Errors surfaced by the library.
///
/// `Config` covers invalid construction parameters (bad dimensions,
/// infeasible budgets), `Input` covers bad runtime arguments (out-of-range
/// token ids, shape mismatches), `Training` covers failures mid-run
/// (non-finite loss), and `Io`/`Format` cover file handling.
#[derive(Debug)]
pub enum RiseError {
    Config(String),
    Input(String),
    Training(String),
    Io(std::io::Error),
    Format(String),
}

impl fmt::Display for RiseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiseError::Config(msg) => write!(f, "configuration error: {msg}"),
            RiseError::Input(msg) => write!(f, "input error: {msg}"),
            RiseError::Training(msg) => write!(f, "training error: {msg}"),
            RiseError::Io(err) => write!(f, "io error: {err}"),
            RiseError::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for RiseError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            RiseError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for RiseError {
    fn from(err: std::io::Error) -> Self {
        RiseError::Io(err)
    }
}

impl From<serde_json::Error> for RiseError {
    fn from(err: serde_json::Error) -> Self {
        RiseError::Format(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RiseError>;

impl RiseError {
    pub fn is_config(&self) -> bool {
        matches!(self, RiseError::Config(_))
    }

    pub fn is_input(&self) -> bool {
        matches!(self, RiseError::Input(_))
    }
}
