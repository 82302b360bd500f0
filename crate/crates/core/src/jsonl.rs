//! JSON-lines helpers shared by every on-disk format.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &Path, source: io::Error) -> JsonlError {
    JsonlError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Non-empty lines of a file with their 1-based line numbers.
pub fn lines(path: &Path) -> Result<Vec<(usize, String)>, JsonlError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if !line.trim().is_empty() {
            out.push((idx + 1, line));
        }
    }
    Ok(out)
}

/// Parses every line, failing on the first malformed one.
pub fn read_strict<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| JsonlError::Parse {
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_all<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
