//! Text file formats and checkpoints.
//!
//! Every reader reports problems with the path and 1-based line number.

mod checkpoint;
mod tables;

pub use checkpoint::{
    load_codebook, load_model, parse_checkpoint, render_checkpoint, save_codebook, save_model, Checkpoint, CheckpointKind,
    FORMAT_VERSION, MAGIC,
};
pub use tables::{
    load_dataset, read_captions, read_descriptor_file, read_feature_file, read_score_file, write_captions,
    write_descriptor_file, write_feature_file, CaptionRecord, DatasetPaths, FeatureTable, LoadedDataset, VocabSource,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error("{}:{line}: duplicate clip id {id}", path.display())]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("{}:{line}: expected {expected} values, got {got}", path.display())]
    Dim {
        path: PathBuf,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("{}:{line}: clip id {id} has no row in {}", path.display(), features.display())]
    MissingJoin {
        path: PathBuf,
        line: usize,
        id: String,
        features: PathBuf,
    },
    #[error("{}: unsupported format version {found} (expected {expected})", path.display())]
    Version { path: PathBuf, found: String, expected: u32 },
    #[error("{}:{line}: shape error: {msg}", path.display())]
    Shape { path: PathBuf, line: usize, msg: String },
    #[error("{}: truncated: {msg}", path.display())]
    Truncated { path: PathBuf, msg: String },
}

impl IoError {
    pub(crate) fn malformed(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        IoError::Malformed {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// 17 significant digits, enough for an exact f64 round trip.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn push_values(out: &mut String, values: &[f64], sep: char) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(sep);
        }
        let _ = write!(out, "{v:.16e}");
    }
}

pub(crate) fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64, IoError> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(IoError::malformed(path, line, format!("non-finite value {s:?}"))),
        Err(_) => Err(IoError::malformed(path, line, format!("cannot parse {s:?} as a number"))),
    }
}
