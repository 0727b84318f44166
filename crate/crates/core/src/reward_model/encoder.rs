//! Frozen instruction encoders.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("no cached embedding for {0:?}")]
    Missing(String),
    #[error("embedding for {text:?} has dimension {got}, expected {expected}")]
    Dimension { text: String, got: usize, expected: usize },
    #[error("embedding cache line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps instruction text to a fixed-length vector. Implementations are
/// deterministic and never updated by training.
pub trait LanguageEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>, EncoderError>;
}

/// Feature-hashing encoder over word unigrams and bigrams.
///
/// Each feature string is hashed with SHA-256; the first 8 bytes pick a
/// bucket and a sign. The result is L2-normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    dim: usize,
}

impl HashEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        HashEncoder { dim }
    }
}

impl Default for HashEncoder {
    fn default() -> Self {
        HashEncoder::new(512)
    }
}

impl LanguageEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut features: Vec<String> = tokens.iter().map(|t| format!("u:{t}")).collect();
        let padded: Vec<&str> = std::iter::once("^")
            .chain(tokens.iter().map(String::as_str))
            .chain(std::iter::once("$"))
            .collect();
        features.extend(padded.windows(2).map(|w| format!("b:{}_{}", w[0], w[1])));

        let mut v = vec![0.0; self.dim];
        for f in &features {
            let digest = Sha256::digest(f.as_bytes());
            let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// One line of an embedding cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub text: String,
    #[serde(rename = "E")]
    pub dim: usize,
    pub vector: Vec<f64>,
}

/// Serves embeddings precomputed by an external pretrained encoder.
#[derive(Debug, Clone)]
pub struct CachedEmbeddingEncoder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl CachedEmbeddingEncoder {
    pub fn from_records(dim: usize, records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<Self, EncoderError> {
        let mut table = HashMap::new();
        for r in records {
            if r.dim != dim || r.vector.len() != dim {
                return Err(EncoderError::Dimension {
                    text: r.text,
                    got: r.vector.len(),
                    expected: dim,
                });
            }
            table.insert(r.text, r.vector);
        }
        Ok(CachedEmbeddingEncoder { dim, table })
    }

    /// Loads a line-delimited JSON file of [`EmbeddingRecord`]s. The
    /// dimension is taken from the first record.
    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str::<EmbeddingRecord>(&line)
                    .map_err(|source| EncoderError::Parse { line: i + 1, source })?,
            );
        }
        let dim = records.first().map_or(0, |r| r.dim);
        Self::from_records(dim, records)
    }
}

impl LanguageEncoder for CachedEmbeddingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| EncoderError::Missing(text.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn hash_encoder_is_deterministic_and_normalised() {
        let e = HashEncoder::new(64);
        let a = e.encode("Stay away from the laptop").unwrap();
        let b = e.encode("Stay away from the laptop").unwrap();
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_ne!(a, e.encode("Stay close to the laptop").unwrap());
    }

    #[test]
    fn cache_encoder_loads_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text":"Stay away","E":3,"vector":[0.1,0.2,0.3]}}"#).unwrap();
        writeln!(f, r#"{{"text":"The table","E":3,"vector":[1.0,0.0,0.0]}}"#).unwrap();
        let enc = CachedEmbeddingEncoder::load(f.path()).unwrap();
        assert_eq!(enc.dim(), 3);
        assert_eq!(enc.encode("Stay away").unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(matches!(enc.encode("nope"), Err(EncoderError::Missing(_))));
    }

    #[test]
    fn cache_encoder_rejects_wrong_dimension() {
        let rec = EmbeddingRecord {
            text: "x".into(),
            dim: 2,
            vector: vec![1.0],
        };
        assert!(CachedEmbeddingEncoder::from_records(2, [rec]).is_err());
    }
}
