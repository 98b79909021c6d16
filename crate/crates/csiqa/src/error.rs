use std::path::PathBuf;

use crate::checkpoint::CheckpointError;
use crate::manifest::RowError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Pnm { path: PathBuf, msg: String },
    #[error("{path}: {}", format_rows(.rows))]
    Manifest { path: PathBuf, rows: Vec<RowError> },
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("{origin} line {line}: {msg}")]
    Config { origin: String, line: usize, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] csiqa_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn format_rows(rows: &[RowError]) -> String {
    let mut out = format!("{} bad row(s)", rows.len());
    for r in rows {
        out.push_str(&format!("\n  line {}: {}", r.line, r.msg));
    }
    out
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status: 3 for numerical failure, 2 for everything the
    /// caller can fix (arguments, inputs, files).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(csiqa_core::Error::NonFiniteLoss { .. }) => 3,
            _ => 2,
        }
    }
}
