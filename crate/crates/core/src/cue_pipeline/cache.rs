use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CueError, CueSet, Provenance};

/// One line of the cue cache.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueRecord {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub image_id: String,
    pub participant: String,
    pub body_language: String,
    pub environmental: String,
}

impl CueRecord {
    pub fn from_cue_set(c: &CueSet) -> Self {
        Self {
            image_id: c.image_id.clone(),
            participant: c.participant.clone(),
            body_language: c.body_language.clone(),
            environmental: c.environmental.clone(),
        }
    }

    pub fn into_cue_set(self, image_id: &str, provenance: Provenance) -> CueSet {
        CueSet {
            image_id: image_id.to_string(),
            participant: self.participant,
            body_language: self.body_language,
            environmental: self.environmental,
            provenance,
        }
    }
}

/// Append-only JSON-lines cache keyed by image id. Later lines win.
#[derive(Debug)]
pub struct CueCache {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    entries: HashMap<String, CueRecord>,
    writer: Option<File>,
}

impl CueCache {
    /// A cache that lives only in memory.
    pub fn in_memory() -> Self {
        Self { path: None, inner: Mutex::new(Inner::default()) }
    }

    /// Opens (creating on first write) the cache file at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CueError> {
        let path = path.as_ref().to_path_buf();
        let err = |reason: String| CueError::Cache { path: path.display().to_string(), reason };
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| err(e.to_string()))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CueRecord =
                    serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", n + 1)))?;
                entries.insert(rec.image_id.clone(), rec);
            }
        }
        Ok(Self { path: Some(path), inner: Mutex::new(Inner { entries, writer: None }) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, image_id: &str) -> Option<CueSet> {
        let inner = self.inner.lock().expect("cue cache lock");
        inner.entries.get(image_id).cloned().map(|r| r.into_cue_set(image_id, Provenance::Cache))
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cue cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `cues`, appending one line to the backing file. Writes are serialized.
    pub fn insert(&self, cues: &CueSet) -> Result<(), CueError> {
        let rec = CueRecord::from_cue_set(cues);
        let mut inner = self.inner.lock().expect("cue cache lock");
        if let Some(path) = &self.path {
            let err = |reason: String| CueError::Cache { path: path.display().to_string(), reason };
            if inner.writer.is_none() {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
                }
                let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| err(e.to_string()))?;
                inner.writer = Some(f);
            }
            let mut line = serde_json::to_string(&rec).expect("cue record serializes");
            line.push('\n');
            let w = inner.writer.as_mut().expect("writer opened above");
            w.write_all(line.as_bytes()).map_err(|e| err(e.to_string()))?;
            w.flush().map_err(|e| err(e.to_string()))?;
        }
        inner.entries.insert(rec.image_id.clone(), rec);
        Ok(())
    }
}
