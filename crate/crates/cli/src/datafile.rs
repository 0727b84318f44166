//! Line-delimited dataset files and JSON bank files.
//!
//! A dataset file starts with one header record followed by one
//! [`AnnotatedExample`] per line. Floats are written in shortest round-trip
//! form, so write → read → write is byte-identical.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mirl_core::types::AnnotatedExample;
use mirl_core::world::TrajectoryBank;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATASET_FORMAT: &str = "mirl-dataset";
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub layout_version: u32,
    pub seed: u64,
    /// What the file holds, e.g. `train` or `finetune`.
    pub kind: String,
    pub count: usize,
    /// Set once masks (and disambiguations) have been attached.
    pub annotated: bool,
}

impl DatasetHeader {
    pub fn new(kind: &str, seed: u64, count: usize, annotated: bool) -> Self {
        DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            layout_version: LAYOUT_VERSION,
            seed,
            kind: kind.to_string(),
            count,
            annotated,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub examples: Vec<AnnotatedExample>,
}

impl Dataset {
    pub fn new(kind: &str, seed: u64, examples: Vec<AnnotatedExample>, annotated: bool) -> Self {
        Dataset {
            header: DatasetHeader::new(kind, seed, examples.len(), annotated),
            examples,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serialises");
        out.push(b'\n');
        for e in &self.examples {
            serde_json::to_writer(&mut out, e).expect("example serialises");
            out.push(b'\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Dataset, CliError> {
        let reader = BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?);
        let mut lines = reader.lines().enumerate();
        let bad = |line: usize, reason: String| CliError::Dataset {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let header: DatasetHeader = match lines.next() {
            Some((_, l)) => {
                let l = l.map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&l).map_err(|e| bad(1, format!("header: {e}")))?
            }
            None => return Err(bad(1, "empty file".into())),
        };
        if header.format != DATASET_FORMAT || header.layout_version != LAYOUT_VERSION {
            return Err(bad(
                1,
                format!("unsupported format {} v{}", header.format, header.layout_version),
            ));
        }
        let mut examples = Vec::with_capacity(header.count);
        for (i, l) in lines {
            let l = l.map_err(|e| CliError::io(path, e))?;
            if l.is_empty() {
                continue;
            }
            examples.push(serde_json::from_str(&l).map_err(|e| bad(i + 1, e.to_string()))?);
        }
        if examples.len() != header.count {
            return Err(bad(
                0,
                format!("header announces {} examples, found {}", header.count, examples.len()),
            ));
        }
        Ok(Dataset { header, examples })
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?);
        w.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
        w.flush().map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_bank(path: &Path, bank: &TrajectoryBank) -> Result<(), CliError> {
    write_atomic(path, &serde_json::to_vec(bank).expect("bank serialises"))
}

pub fn read_bank(path: &Path) -> Result<TrajectoryBank, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Dataset {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })
}
