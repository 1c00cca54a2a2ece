//! Append-only JSONL cache of oracle queries keyed by prompt digest.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::formats::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt cache record on line {line} of {path}: {source}")]
    Corrupt { path: PathBuf, line: usize, source: serde_json::Error },
}

/// One line of the cache file. `mu` is `None` for pairs that were discarded
/// because no attempt produced a parseable answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub digest: String,
    pub model: String,
    pub prompt: String,
    pub response: String,
    pub mu: Option<[f64; 2]>,
    pub timestamp: u64,
}

impl CacheRecord {
    pub fn new(model: &str, prompt: &str, response: String, mu: Option<[f64; 2]>) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        CacheRecord { digest: prompt_digest(model, prompt), model: model.to_owned(), prompt: prompt.to_owned(), response, mu, timestamp }
    }
}

/// Digest of the model id and the full prompt text.
pub fn prompt_digest(model: &str, prompt: &str) -> String {
    sha256_hex(format!("{model}\n{prompt}").as_bytes())
}

/// In-memory index over the cache file. Later lines win over earlier ones.
#[derive(Debug)]
pub struct PromptCache {
    path: Option<PathBuf>,
    inner: Mutex<CacheInner>,
}

#[derive(Debug, Default)]
struct CacheInner {
    records: HashMap<String, CacheRecord>,
    file: Option<File>,
}

impl PromptCache {
    /// Cache that lives only for this process.
    pub fn in_memory() -> Self {
        PromptCache { path: None, inner: Mutex::new(CacheInner::default()) }
    }

    /// Loads `path` if it exists and appends new records to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| CacheError::Io { path: path.clone(), source };
        let mut records = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord = serde_json::from_str(&line)
                    .map_err(|source| CacheError::Corrupt { path: path.clone(), line: i + 1, source })?;
                records.insert(record.digest.clone(), record);
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err)?;
        Ok(PromptCache { path: Some(path), inner: Mutex::new(CacheInner { records, file: Some(file) }) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, digest: &str) -> Option<CacheRecord> {
        self.inner.lock().expect("cache lock").records.get(digest).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, record: CacheRecord) -> Result<(), CacheError> {
        let mut inner = self.inner.lock().expect("cache lock");
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&record).expect("cache records serialize");
            line.push('\n');
            let path = self.path.clone().unwrap_or_default();
            file.write_all(line.as_bytes()).and_then(|()| file.flush()).map_err(|source| CacheError::Io { path, source })?;
        }
        inner.records.insert(record.digest.clone(), record);
        Ok(())
    }
}
