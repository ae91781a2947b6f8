//! Error classification and the `run.json` record.

use std::fmt;
use std::path::Path;

use fusionreg::Error;
use serde_json::{json, Value};

use crate::{EXIT_INTERNAL, EXIT_USAGE};

/// A failed command, tagged with the exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Internal(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        CliError::Usage(anyhow::anyhow!("{msg}"))
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, CliError::Usage(_))
    }

    pub fn exit_code(&self) -> u8 {
        if self.is_usage() {
            EXIT_USAGE
        } else {
            EXIT_INTERNAL
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Internal(e) => {
                if f.alternate() {
                    write!(f, "{e:#}")
                } else {
                    write!(f, "{e}")
                }
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::EmptyDataset(_) | Error::NotImplemented(_) => {
                CliError::Usage(e.into())
            }
            other => CliError::Internal(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Internal(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reject a missing input path as a usage error.
pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} is not a directory", path.display())))
    }
}

/// Write `<dir>/run.json`: the command, its argv, the package version and
/// any command-specific details (resolved config, seeds, outputs).
pub fn write_run_record(dir: &Path, command: &str, details: Value) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| anyhow::anyhow!("creating {}: {e}", dir.display()))?;
    let record = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "details": details,
    });
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&record).map_err(anyhow::Error::from)?;
    std::fs::write(&path, text + "\n").map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    Ok(())
}

/// Directory that holds a file output (its parent, or `.`).
pub fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}
