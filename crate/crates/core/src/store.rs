//! On-disk state: the content-addressed response cache, per-run session
//! logs, profile checkpoints and run manifests.
//!
//! Layout:
//!
//! ```text
//! <cache_dir>/<2 hex>/<sha256>.json        one ChatOutcome per file
//! <runs_dir>/<run_id>/manifest-<run_id>.jsonl
//! <runs_dir>/<run_id>/sessions-<run_id>-<method>.jsonl
//! <runs_dir>/<run_id>/checkpoints-<run_id>-<method>.jsonl
//! <runs_dir>/<run_id>/buckets-<run_id>.json
//! <runs_dir>/<run_id>/metrics-<run_id>.csv
//! <runs_dir>/<run_id>/tradeoff-<run_id>.csv
//! ```
//!
//! Every file is line-delimited JSON (or CSV) and safe to inspect by hand.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::StoreError;
use crate::gateway::{ChatOutcome, SchemaId};
use crate::profile::Profile;

pub const CACHE_DIGEST: &str = "sha256";

/// Digest of everything that determines a reply.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(String);

impl CacheKey {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backend_id: &str,
        model_id: &str,
        temperature: f64,
        schema: SchemaId,
        system_text: &str,
        user_text: &str,
        prompt_version: &str,
    ) -> Self {
        let mut h = Sha256::new();
        let temp = format!("{temperature:?}");
        for part in [
            backend_id,
            model_id,
            temp.as_str(),
            schema.as_str(),
            system_text,
            user_text,
            prompt_version,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Append-only response cache; the first write of a key wins.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    corrupt: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
        Ok(Self {
            dir,
            corrupt: AtomicU64::new(0),
        })
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(&key.0[..2]).join(format!("{}.json", key.0))
    }

    /// Unreadable or undecodable entries count as misses.
    pub fn get(&self, key: &CacheKey) -> Option<ChatOutcome> {
        let bytes = fs::read(self.path(key)).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(_) => {
                self.corrupt.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn put(&self, key: &CacheKey, outcome: &ChatOutcome) -> Result<(), StoreError> {
        let path = self.path(key);
        if path.exists() {
            return Ok(());
        }
        let parent = path.parent().expect("cache entries live in a shard dir");
        fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
        let mut tmp =
            tempfile::NamedTempFile::new_in(parent).map_err(|e| StoreError::io(parent, e))?;
        serde_json::to_writer(&mut tmp, outcome)?;
        tmp.flush().map_err(|e| StoreError::io(&path, e))?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(()),
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => Ok(()),
            Err(e) => Err(StoreError::io(&path, e.error)),
        }
    }

    pub fn corrupt_entries(&self) -> u64 {
        self.corrupt.load(Ordering::Relaxed)
    }
}

/// Appends JSON lines to a file under a lock so concurrent writers never
/// interleave within a line.
#[derive(Debug)]
pub struct JsonlWriter {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonlWriter {
    pub fn append(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn write<T: Serialize>(&self, value: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(value)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(&line)
            .map_err(|e| StoreError::io(&self.path, e))?;
        file.flush().map_err(|e| StoreError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every decodable line; a torn or corrupt line is skipped.
/// A missing file reads as empty.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if let Ok(v) = serde_json::from_str(&line) {
            out.push(v);
        }
    }
    Ok(out)
}

/// One persisted profile snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub user_id: String,
    pub version: u32,
    pub likes: Vec<String>,
    pub dislikes: Vec<String>,
    pub features: Vec<String>,
}

impl CheckpointRecord {
    pub fn profile(&self) -> Profile {
        Profile {
            likes: self.likes.clone(),
            dislikes: self.dislikes.clone(),
            features: self.features.clone(),
            version: self.version,
        }
    }
}

/// Profile checkpoints for one method of one run.
#[derive(Debug)]
pub struct CheckpointStore {
    writer: JsonlWriter,
    /// user → versions written, in order.
    index: Mutex<BTreeMap<String, Vec<CheckpointRecord>>>,
}

impl CheckpointStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let mut index: BTreeMap<String, Vec<CheckpointRecord>> = BTreeMap::new();
        for rec in read_jsonl::<CheckpointRecord>(&path)? {
            let entries = index.entry(rec.user_id.clone()).or_default();
            if rec.version == 0 {
                entries.clear();
            }
            entries.push(rec);
        }
        Ok(Self {
            writer: JsonlWriter::append(path)?,
            index: Mutex::new(index),
        })
    }

    /// Versions must strictly increase per user. Version 0 (the empty
    /// profile) restarts the user's stream and discards earlier versions.
    pub fn checkpoint_profile(&self, user_id: &str, profile: &Profile) -> Result<(), StoreError> {
        let mut index = self.index.lock().unwrap();
        let entries = index.entry(user_id.to_string()).or_default();
        if profile.version == 0 {
            entries.clear();
        }
        if let Some(last) = entries.last() {
            if profile.version <= last.version {
                return Err(StoreError::OutOfOrder {
                    user_id: user_id.to_string(),
                    version: profile.version,
                    last: last.version,
                });
            }
        }
        let rec = CheckpointRecord {
            user_id: user_id.to_string(),
            version: profile.version,
            likes: profile.likes.clone(),
            dislikes: profile.dislikes.clone(),
            features: profile.features.clone(),
        };
        self.writer.write(&rec)?;
        entries.push(rec);
        Ok(())
    }

    /// Restarts the user's stream so it can be recomputed from scratch.
    pub fn reset_user(&self, user_id: &str) -> Result<(), StoreError> {
        self.checkpoint_profile(user_id, &Profile::default())
    }

    pub fn has_user(&self, user_id: &str) -> bool {
        self.index
            .lock()
            .unwrap()
            .get(user_id)
            .is_some_and(|e| !e.is_empty())
    }

    /// Latest profile for the user. Versions must be contiguous from the
    /// first one written; a gap means the stream cannot be trusted.
    pub fn load_checkpoint(&self, user_id: &str) -> Result<Option<Profile>, StoreError> {
        let index = self.index.lock().unwrap();
        let Some(entries) = index.get(user_id) else {
            return Ok(None);
        };
        // Version 0 marks a restart; contiguity starts at the first real
        // snapshot after it.
        let mut versions: Vec<u32> = entries
            .iter()
            .map(|e| e.version)
            .filter(|&v| v > 0)
            .collect();
        versions.sort_unstable();
        versions.dedup();
        for pair in versions.windows(2) {
            if pair[1] != pair[0] + 1 {
                return Err(StoreError::VersionGap {
                    user_id: user_id.to_string(),
                    missing: pair[0] + 1,
                });
            }
        }
        Ok(entries
            .iter()
            .max_by_key(|e| e.version)
            .map(CheckpointRecord::profile))
    }
}

/// File names for one run; every name embeds the run id.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub run_id: String,
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(runs_dir: &Path, run_id: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            dir: runs_dir.join(run_id),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join(format!("manifest-{}.jsonl", self.run_id))
    }

    pub fn sessions(&self, method_key: &str) -> PathBuf {
        self.dir
            .join(format!("sessions-{}-{}.jsonl", self.run_id, method_key))
    }

    pub fn checkpoints(&self, method_key: &str) -> PathBuf {
        self.dir
            .join(format!("checkpoints-{}-{}.jsonl", self.run_id, method_key))
    }

    pub fn buckets(&self) -> PathBuf {
        self.dir.join(format!("buckets-{}.json", self.run_id))
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join(format!("metrics-{}.csv", self.run_id))
    }

    pub fn tradeoff_csv(&self) -> PathBuf {
        self.dir.join(format!("tradeoff-{}.csv", self.run_id))
    }

    pub fn exists(&self) -> bool {
        self.manifest().exists()
    }
}

/// Counters carried in manifest records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub sessions: u64,
    pub fallbacks: u64,
    pub hallucinations: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub usage_reported: u64,
    pub usage_estimated: u64,
    /// Backend-reported vs fallback-tokenizer prompt tokens over the calls
    /// that reported usage; their ratio calibrates the fallback.
    pub reported_prompt_tokens: u64,
    pub estimated_prompt_tokens: u64,
}

/// One manifest line. A run writes `start` (or `resume`) before its first
/// session and `finish` (or `abort`) after its last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub event: String,
    pub run_id: String,
    pub dataset_digest: String,
    pub config: serde_json::Value,
    pub run_seed: u64,
    pub prompt_version: String,
    pub backend_id: String,
    pub model_id: String,
    pub tokenizer_id: String,
    pub cache_digest: String,
    pub timestamp_unix: u64,
    pub counters: RunCounters,
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `contents` via a temporary file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), StoreError> {
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| StoreError::io(parent, e))?;
    tmp.write_all(contents)
        .map_err(|e| StoreError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| StoreError::io(path, e.error))?;
    Ok(())
}
