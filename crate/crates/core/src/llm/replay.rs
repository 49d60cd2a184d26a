//! Record/replay fixtures.
//!
//! A fixture file is JSON lines; each line is
//! `{"digest": <sha256 hex>, "request": <canonical request>, "texts": [...]}`.
//! Only `digest` and `texts` are read back; `request` is kept for humans.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ChatBackend, ChatRequest, LlmError, LlmResponse, Usage};
use crate::json::canonical_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<Value>,
    pub texts: Vec<String>,
}

impl FixtureEntry {
    pub fn for_request(request: &ChatRequest, texts: Vec<String>) -> Self {
        FixtureEntry { digest: request.digest(), request: Some(request.to_json()), texts }
    }

    /// One canonical JSON line (no trailing newline).
    pub fn to_line(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("fixture entries serialize"))
    }
}

/// Read-only backend answering from recorded fixtures.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    entries: HashMap<String, Vec<String>>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let file = File::open(path).map_err(|e| LlmError::Fixture(format!("{}: {e}", path.display())))?;
        let mut backend = ReplayBackend::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LlmError::Fixture(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(&line)
                .map_err(|e| LlmError::Fixture(format!("{}:{}: {e}", path.display(), n + 1)))?;
            backend.insert(entry);
        }
        Ok(backend)
    }

    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut backend = ReplayBackend::default();
        entries.into_iter().for_each(|e| backend.insert(e));
        backend
    }

    pub fn insert(&mut self, entry: FixtureEntry) {
        self.entries.insert(entry.digest, entry.texts);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
        let digest = request.digest();
        let texts = self.entries.get(&digest).ok_or_else(|| LlmError::FixtureMiss { digest: digest.clone() })?;
        let n = request.params.n_samples as usize;
        if texts.len() < n {
            return Err(LlmError::Fixture(format!("entry {digest} has {} texts, request wants {n}", texts.len())));
        }
        Ok(LlmResponse { texts: texts[..n].to_vec(), model_id: request.model.clone(), usage: Usage::default() })
    }
}

/// Wraps another backend and appends every new exchange to a fixture file.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    file: Mutex<File>,
    seen: Mutex<HashSet<String>>,
}

impl RecordingBackend {
    pub fn open(path: &Path, inner: Arc<dyn ChatBackend>) -> Result<Self, LlmError> {
        let seen: HashSet<String> = if path.exists() {
            ReplayBackend::load(path)?.entries.into_keys().collect()
        } else {
            HashSet::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Fixture(format!("{}: {e}", path.display())))?;
        Ok(RecordingBackend { inner, file: Mutex::new(file), seen: Mutex::new(seen) })
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
        let response = self.inner.complete(request)?;
        let entry = FixtureEntry::for_request(request, response.texts.clone());
        let mut seen = self.seen.lock().unwrap_or_else(|e| e.into_inner());
        if seen.insert(entry.digest.clone()) {
            let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
            writeln!(file, "{}", entry.to_line())
                .and_then(|_| file.flush())
                .map_err(|e| LlmError::Fixture(e.to_string()))?;
        }
        Ok(response)
    }
}
