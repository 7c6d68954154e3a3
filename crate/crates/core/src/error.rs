use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("network is not connected: {0}")]
    Disconnected(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("checksum mismatch: file is corrupted or truncated")]
    Checksum,
    #[error("malformed file: {0}")]
    Format(String),
    #[error("training diverged at epoch {0}: loss is not finite")]
    Diverged(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_check(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension(format!(
            "{what}: expected length {expected}, found {found}"
        )));
    }
    Ok(())
}
