//! Output directory resolution and file writers.

use std::fs;
use std::path::{Path, PathBuf};

use modelslice::{Error, Result};
use serde::Serialize;

use crate::OUT_ENV;

/// Where a verb writes: `--out`, then `$MODELSLICE_OUT`, then the verb's
/// own default.
#[derive(Clone, Debug)]
pub struct OutDir {
    explicit: Option<PathBuf>,
    verb: &'static str,
}

impl OutDir {
    pub fn resolve(flag: Option<PathBuf>, verb: &'static str) -> Self {
        let env = std::env::var_os(OUT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);
        Self {
            explicit: flag.or(env),
            verb,
        }
    }

    /// Creates and returns the directory, falling back to `default` or
    /// `runs/<verb>`.
    pub fn create(&self, default: Option<&Path>) -> Result<PathBuf> {
        let dir = match (&self.explicit, default) {
            (Some(d), _) => d.clone(),
            (None, Some(d)) => d.to_path_buf(),
            (None, None) => Path::new("runs").join(self.verb),
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &(text + "\n"))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Serializes rows under their field names as the header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Appends rows to a CSV file, writing the header first if the file is new.
pub fn append_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if fresh {
        w.write_record(header).map_err(csv_error)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
