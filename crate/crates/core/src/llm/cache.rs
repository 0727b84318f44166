//! Append-only annotation cache keyed by prompt content.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::provider::ChatRequest;
use super::LlmError;

/// One cache line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub family: String,
    pub model: String,
    pub raw: String,
    pub parsed: Value,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Hex SHA-256 over family, model, round and both prompt texts.
pub fn cache_key(request: &ChatRequest) -> String {
    let mut h = Sha256::new();
    for part in [
        request.family.name(),
        &request.model,
        &request.round.to_string(),
        &request.system,
        &request.user,
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

/// In-memory map, optionally mirrored to a line-delimited JSON file.
/// Later lines for the same key win.
#[derive(Debug, Default)]
pub struct AnnotationCache {
    path: Option<PathBuf>,
    records: Mutex<HashMap<String, CacheRecord>>,
}

impl AnnotationCache {
    pub fn in_memory() -> Self {
        AnnotationCache::default()
    }

    /// Loads `path` if it exists; new records are appended to it.
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let mut records = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: CacheRecord = serde_json::from_str(&line).map_err(|e| LlmError::Cache {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                records.insert(r.key.clone(), r);
            }
        }
        Ok(AnnotationCache {
            path: Some(path.to_path_buf()),
            records: Mutex::new(records),
        })
    }

    pub fn get(&self, key: &str) -> Option<CacheRecord> {
        self.records.lock().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, request: &ChatRequest, raw: &str, parsed: Value) -> Result<(), LlmError> {
        let record = CacheRecord {
            key: cache_key(request),
            family: request.family.name().to_string(),
            model: request.model.clone(),
            raw: raw.to_string(),
            parsed,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let mut records = self.records.lock().expect("cache lock");
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&record).map_err(|e| LlmError::Cache {
                line: 0,
                reason: e.to_string(),
            })?;
            line.push('\n');
            // One write per record keeps concurrent appends line-atomic.
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?
                .write_all(line.as_bytes())?;
        }
        records.insert(record.key.clone(), record);
        Ok(())
    }
}
