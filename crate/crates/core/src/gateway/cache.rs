use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub estimated: bool,
    pub latency_ms: f64,
    pub backend_id: String,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    fingerprint: String,
    #[serde(flatten)]
    entry: CacheEntry,
}

/// Fingerprint-keyed response store. Disk-backed caches are append-only JSONL
/// files; readers share a lock and writers are serialized.
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) a cache file. Unparseable lines, such as a torn final
    /// write, are skipped.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if let Ok(parsed) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(parsed.fingerprint, parsed.entry);
                }
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let existing = std::fs::read(path)?;
        if existing.last().is_some_and(|b| *b != b'\n') {
            file.write_all(b"\n")?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, fingerprint: &str) -> Option<CacheEntry> {
        self.entries
            .read()
            .expect("cache poisoned")
            .get(fingerprint)
            .cloned()
    }

    /// First write wins; later inserts for the same fingerprint are ignored.
    pub fn insert(&self, fingerprint: &str, entry: CacheEntry) -> io::Result<()> {
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        {
            let mut entries = self.entries.write().expect("cache poisoned");
            if entries.contains_key(fingerprint) {
                return Ok(());
            }
            entries.insert(fingerprint.to_string(), entry.clone());
        }
        if let Some(file) = writer.as_mut() {
            let line = serde_json::to_string(&CacheLine {
                fingerprint: fingerprint.to_string(),
                entry,
            })?;
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        Ok(())
    }
}
