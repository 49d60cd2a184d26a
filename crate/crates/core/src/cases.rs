//! The case repository: past extraction traces, split into correct cases
//! (with reasoning steps) and bad cases (with reflections).
//!
//! Retrieval scores every candidate with a weighted mix of embedding cosine
//! similarity and normalized edit-distance similarity, then keeps the top k.
//! Persistence is one JSON object per line in `correct.jsonl` / `bad.jsonl`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::json::canonical_json;
use crate::llm::{digest_hex, EmbeddingVector};
use crate::schema::TaskKind;

/// Default number of retrieved cases.
pub const DEFAULT_TOP_K: usize = 2;
/// Stored source excerpts are cut to this many characters.
pub const EXCERPT_CHARS: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("embedding dimension {found} does not match {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid case record: {0}")]
    InvalidRecord(String),
    #[error("invalid retrieval weights: {0}")]
    InvalidWeights(String),
    #[error("case store persistence failed on {path}: {reason}")]
    Persistence { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseKind {
    Correct,
    Bad,
}

impl CaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseKind::Correct => "correct",
            CaseKind::Bad => "bad",
        }
    }

    fn file_name(self) -> &'static str {
        match self {
            CaseKind::Correct => "correct.jsonl",
            CaseKind::Bad => "bad.jsonl",
        }
    }
}

impl fmt::Display for CaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether a correct case's answer was checked against a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Verified,
    Unverified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub kind: CaseKind,
    pub task_kind: TaskKind,
    pub task_description: String,
    pub input_excerpt: String,
    pub schema_json: String,
    pub answer_json: String,
    /// Reasoning steps for a correct case, reflection for a bad one.
    pub annotation: String,
    pub embedding: EmbeddingVector,
    pub created_at: String,
    #[serde(default)]
    pub provenance: Provenance,
}

/// The fields a caller supplies; id, excerpt truncation and timestamp are
/// filled in by [`NewCase::into_record`].
#[derive(Debug, Clone)]
pub struct NewCase {
    pub kind: CaseKind,
    pub task_kind: TaskKind,
    pub task_description: String,
    pub input: String,
    pub schema_json: String,
    pub answer_json: String,
    pub annotation: String,
    pub provenance: Provenance,
}

impl NewCase {
    pub fn excerpt(&self) -> String {
        truncate_chars(&self.input, EXCERPT_CHARS).to_string()
    }

    /// The text this case is matched on: description plus excerpt.
    pub fn match_text(&self) -> String {
        match_text(&self.task_description, &self.excerpt())
    }

    pub fn dedup_key(&self) -> String {
        dedup_key(self.kind, &self.task_description, &self.excerpt(), &self.answer_json)
    }

    pub fn into_record(self, embedding: EmbeddingVector) -> CaseRecord {
        let input_excerpt = self.excerpt();
        let key = dedup_key(self.kind, &self.task_description, &input_excerpt, &self.answer_json);
        CaseRecord {
            case_id: case_id(self.kind, &key),
            kind: self.kind,
            task_kind: self.task_kind,
            task_description: self.task_description,
            input_excerpt,
            schema_json: self.schema_json,
            answer_json: self.answer_json,
            annotation: self.annotation,
            embedding,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            provenance: self.provenance,
        }
    }
}

impl CaseRecord {
    pub fn dedup_key(&self) -> String {
        dedup_key(self.kind, &self.task_description, &self.input_excerpt, &self.answer_json)
    }

    pub fn match_text(&self) -> String {
        match_text(&self.task_description, &self.input_excerpt)
    }

    pub fn validate(&self, dim: usize) -> Result<(), CaseError> {
        if self.case_id.is_empty() {
            return Err(CaseError::InvalidRecord("empty case_id".into()));
        }
        if self.annotation.trim().is_empty() {
            return Err(CaseError::InvalidRecord(format!("case {} has an empty annotation", self.case_id)));
        }
        if let Err(e) = serde_json::from_str::<Value>(&self.answer_json) {
            return Err(CaseError::InvalidRecord(format!("case {} answer_json is not JSON: {e}", self.case_id)));
        }
        if self.embedding.dim() != dim {
            return Err(CaseError::DimMismatch { expected: dim, found: self.embedding.dim() });
        }
        Ok(())
    }
}

/// Hash of (kind, task_description, input_excerpt, answer_json).
pub fn dedup_key(kind: CaseKind, task_description: &str, input_excerpt: &str, answer_json: &str) -> String {
    digest_hex(canonical_json(&json!([kind.as_str(), task_description, input_excerpt, answer_json])).as_bytes())
}

fn case_id(kind: CaseKind, key: &str) -> String {
    let prefix = match kind {
        CaseKind::Correct => "c",
        CaseKind::Bad => "b",
    };
    format!("{prefix}-{}", &key[..16])
}

pub fn match_text(task_description: &str, input_excerpt: &str) -> String {
    format!("{task_description}\n{input_excerpt}")
}

pub fn truncate_chars(s: &str, max_chars: usize) -> &str {
    match s.char_indices().nth(max_chars) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn normalize_for_match(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// `1 - levenshtein(a, b) / max(len a, len b)` on lowercased,
/// whitespace-collapsed strings (lengths in characters). Two empty strings
/// score 1.
pub fn lexical_similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (normalize_for_match(a), normalize_for_match(b));
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(&a, &b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalWeights {
    pub semantic: f64,
    pub lexical: f64,
}

impl Default for RetrievalWeights {
    fn default() -> Self {
        RetrievalWeights { semantic: 0.7, lexical: 0.3 }
    }
}

impl RetrievalWeights {
    pub fn new(semantic: f64, lexical: f64) -> Result<Self, CaseError> {
        let w = RetrievalWeights { semantic, lexical };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), CaseError> {
        let ok = self.semantic >= 0.0 && self.lexical >= 0.0 && (self.semantic + self.lexical - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(CaseError::InvalidWeights(format!(
                "weights must be non-negative and sum to 1, got ({}, {})",
                self.semantic, self.lexical
            )))
        }
    }

    pub fn combine(&self, semantic: f64, lexical: f64) -> f64 {
        (self.semantic * semantic + self.lexical * lexical).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub case: CaseRecord,
    pub semantic: f64,
    pub lexical: f64,
    pub combined: f64,
}

pub fn score_case(
    query_text: &str,
    query_embedding: &EmbeddingVector,
    case: &CaseRecord,
    weights: RetrievalWeights,
) -> Result<ScoredCase, CaseError> {
    let cosine = query_embedding
        .cosine(&case.embedding)
        .ok_or(CaseError::DimMismatch { expected: case.embedding.dim(), found: query_embedding.dim() })?;
    let semantic = cosine.max(0.0);
    let lexical = lexical_similarity(query_text, &case.match_text());
    Ok(ScoredCase { case: case.clone(), semantic, lexical, combined: weights.combine(semantic, lexical) })
}

/// Sorts by combined score descending, ties by case id ascending.
pub fn rank(scored: &mut [ScoredCase]) {
    scored.sort_by(|a, b| b.combined.total_cmp(&a.combined).then_with(|| a.case.case_id.cmp(&b.case.case_id)));
}

#[derive(Debug, Default, Clone)]
struct Stores {
    correct: Vec<CaseRecord>,
    bad: Vec<CaseRecord>,
    by_key: HashMap<String, String>,
}

impl Stores {
    fn of(&self, kind: CaseKind) -> &Vec<CaseRecord> {
        match kind {
            CaseKind::Correct => &self.correct,
            CaseKind::Bad => &self.bad,
        }
    }

    fn of_mut(&mut self, kind: CaseKind) -> &mut Vec<CaseRecord> {
        match kind {
            CaseKind::Correct => &mut self.correct,
            CaseKind::Bad => &mut self.bad,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CaseStats {
    pub correct: usize,
    pub bad: usize,
    pub by_task_kind: BTreeMap<String, (usize, usize)>,
}

/// In-memory case store, optionally backed by a directory.
///
/// Reads take a shared lock; writes are serialized and persisted (flushed
/// and synced) before they return, after which they are visible to reads.
#[derive(Debug)]
pub struct CaseStore {
    dir: Option<PathBuf>,
    dim: usize,
    max_cases: Option<usize>,
    inner: RwLock<Stores>,
}

impl Clone for CaseStore {
    /// Clones into an in-memory store; the copy never writes to disk.
    fn clone(&self) -> Self {
        CaseStore { dir: None, dim: self.dim, max_cases: self.max_cases, inner: RwLock::new(self.read().clone()) }
    }
}

impl CaseStore {
    pub fn in_memory(dim: usize) -> Self {
        CaseStore { dir: None, dim, max_cases: None, inner: RwLock::new(Stores::default()) }
    }

    /// Opens (creating if needed) a store directory and loads both files.
    pub fn open(dir: &Path, dim: usize) -> Result<Self, CaseError> {
        fs::create_dir_all(dir).map_err(|e| persistence(dir, e))?;
        let mut stores = Stores::default();
        for kind in [CaseKind::Correct, CaseKind::Bad] {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let file = File::open(&path).map_err(|e| persistence(&path, e))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| persistence(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CaseRecord = serde_json::from_str(&line).map_err(|e| CaseError::Persistence {
                    path: path.display().to_string(),
                    reason: format!("line {}: {e}", n + 1),
                })?;
                record.validate(dim)?;
                if record.kind != kind {
                    return Err(CaseError::InvalidRecord(format!(
                        "{} case {} stored in {}",
                        record.kind,
                        record.case_id,
                        kind.file_name()
                    )));
                }
                if stores.by_key.insert(record.dedup_key(), record.case_id.clone()).is_none() {
                    stores.of_mut(kind).push(record);
                }
            }
        }
        Ok(CaseStore { dir: Some(dir.to_path_buf()), dim, max_cases: None, inner: RwLock::new(stores) })
    }

    /// Keeps at most `max` cases per kind, evicting the oldest.
    pub fn with_max_cases(mut self, max: Option<usize>) -> Self {
        self.max_cases = max;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Stores> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self, kind: CaseKind) -> usize {
        self.read().of(kind).len()
    }

    pub fn is_empty(&self) -> bool {
        let s = self.read();
        s.correct.is_empty() && s.bad.is_empty()
    }

    pub fn cases(&self, kind: CaseKind) -> Vec<CaseRecord> {
        self.read().of(kind).clone()
    }

    pub fn get(&self, case_id: &str) -> Option<CaseRecord> {
        let s = self.read();
        s.correct.iter().chain(&s.bad).find(|c| c.case_id == case_id).cloned()
    }

    /// Id of an existing case with the same dedup key.
    pub fn find_duplicate(&self, key: &str) -> Option<String> {
        self.read().by_key.get(key).cloned()
    }

    pub fn stats(&self) -> CaseStats {
        let s = self.read();
        let mut stats = CaseStats { correct: s.correct.len(), bad: s.bad.len(), by_task_kind: BTreeMap::new() };
        for c in &s.correct {
            stats.by_task_kind.entry(c.task_kind.to_string()).or_default().0 += 1;
        }
        for c in &s.bad {
            stats.by_task_kind.entry(c.task_kind.to_string()).or_default().1 += 1;
        }
        stats
    }

    /// Top-k cases of `kind` and `task_kind`, best first.
    pub fn retrieve_top_k(
        &self,
        query_text: &str,
        query_embedding: &EmbeddingVector,
        kind: CaseKind,
        task_kind: TaskKind,
        k: usize,
        weights: RetrievalWeights,
    ) -> Result<Vec<ScoredCase>, CaseError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if query_embedding.dim() != self.dim {
            return Err(CaseError::DimMismatch { expected: self.dim, found: query_embedding.dim() });
        }
        let stores = self.read();
        let mut scored = stores
            .of(kind)
            .iter()
            .filter(|c| c.task_kind == task_kind)
            .map(|c| score_case(query_text, query_embedding, c, weights))
            .collect::<Result<Vec<_>, _>>()?;
        rank(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    /// Adds one case; a duplicate is a no-op returning the existing id.
    pub fn add_case(&self, record: CaseRecord) -> Result<(String, bool), CaseError> {
        let mut out = self.add_batch(vec![record])?;
        Ok(out.remove(0))
    }

    /// Adds several cases as one unit: either every new case is persisted and
    /// becomes visible, or none is. Returns `(case_id, inserted)` per input.
    pub fn add_batch(&self, records: Vec<CaseRecord>) -> Result<Vec<(String, bool)>, CaseError> {
        for r in &records {
            r.validate(self.dim)?;
        }
        let mut stores = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let mut results = Vec::with_capacity(records.len());
        let mut fresh: Vec<(String, CaseRecord)> = Vec::new();
        let mut fresh_keys: HashMap<String, String> = HashMap::new();
        for r in records {
            let key = r.dedup_key();
            let existing = stores.by_key.get(&key).or_else(|| fresh_keys.get(&key)).cloned();
            match existing {
                Some(id) => results.push((id, false)),
                None => {
                    results.push((r.case_id.clone(), true));
                    fresh_keys.insert(key.clone(), r.case_id.clone());
                    fresh.push((key, r));
                }
            }
        }
        if fresh.is_empty() {
            return Ok(results);
        }
        if let Some(dir) = &self.dir {
            append_all(dir, fresh.iter().map(|(_, r)| r))?;
        }
        for (key, r) in fresh {
            stores.by_key.insert(key, r.case_id.clone());
            stores.of_mut(r.kind).push(r);
        }
        if let Some(max) = self.max_cases {
            for kind in [CaseKind::Correct, CaseKind::Bad] {
                let overflow = stores.of(kind).len().saturating_sub(max);
                if overflow > 0 {
                    let evicted: Vec<CaseRecord> = stores.of_mut(kind).drain(..overflow).collect();
                    for e in &evicted {
                        stores.by_key.remove(&e.dedup_key());
                    }
                    if let Some(dir) = &self.dir {
                        rewrite(&dir.join(kind.file_name()), stores.of(kind))?;
                    }
                }
            }
        }
        Ok(results)
    }

    /// Writes every case (correct first) as JSON lines to `path`.
    pub fn export(&self, path: &Path) -> Result<usize, CaseError> {
        let stores = self.read();
        let all: Vec<&CaseRecord> = stores.correct.iter().chain(&stores.bad).collect();
        let mut body = String::new();
        for r in &all {
            body.push_str(&serde_json::to_string(r).expect("case records serialize"));
            body.push('\n');
        }
        write_atomic(path, body.as_bytes())?;
        Ok(all.len())
    }
}

fn persistence(path: &Path, e: impl fmt::Display) -> CaseError {
    CaseError::Persistence { path: path.display().to_string(), reason: e.to_string() }
}

/// Appends records to their kind files. On failure every file touched is
/// truncated back to its original length.
fn append_all<'a>(dir: &Path, records: impl Iterator<Item = &'a CaseRecord>) -> Result<(), CaseError> {
    let mut touched: Vec<(PathBuf, u64)> = Vec::new();
    let result = (|| {
        for r in records {
            let path = dir.join(r.kind.file_name());
            if !touched.iter().any(|(p, _)| p == &path) {
                let len = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
                touched.push((path.clone(), len));
            }
            let mut file =
                OpenOptions::new().create(true).append(true).open(&path).map_err(|e| persistence(&path, e))?;
            let mut line = serde_json::to_string(r).expect("case records serialize");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| persistence(&path, e))?;
            file.sync_data().map_err(|e| persistence(&path, e))?;
        }
        Ok(())
    })();
    if result.is_err() {
        for (path, len) in &touched {
            if let Ok(f) = OpenOptions::new().write(true).open(path) {
                let _ = f.set_len(*len);
            }
        }
    }
    result
}

fn rewrite(path: &Path, records: &[CaseRecord]) -> Result<(), CaseError> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r).expect("case records serialize"));
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CaseError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| persistence(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| persistence(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| persistence(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::LexicalEmbedder;

    fn new_case(kind: CaseKind, desc: &str, input: &str, answer: &str) -> NewCase {
        NewCase {
            kind,
            task_kind: TaskKind::Ner,
            task_description: desc.into(),
            input: input.into(),
            schema_json: "{}".into(),
            answer_json: answer.into(),
            annotation: "Step 1: read.".into(),
            provenance: Provenance::Verified,
        }
    }

    fn record(kind: CaseKind, desc: &str, input: &str, answer: &str) -> CaseRecord {
        let c = new_case(kind, desc, input, answer);
        let emb = LexicalEmbedder::default().vector(&c.match_text());
        c.into_record(emb)
    }

    #[test]
    fn lexical_examples() {
        assert_eq!(lexical_similarity("Same", "same"), 1.0);
        assert!((lexical_similarity("kitten", "sitting") - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
        assert_eq!(lexical_similarity("", "abc"), 0.0);
        assert_eq!(lexical_similarity("", "  "), 1.0);
        assert_eq!(lexical_similarity("a  b\n", "A B"), 1.0);
    }

    #[test]
    fn combine_arithmetic() {
        let w = RetrievalWeights::default();
        assert!((w.combine(0.5, 0.9) - 0.62).abs() < 1e-12);
        assert!((w.combine(1.0, 1.0) - 1.0).abs() < 1e-12);
        assert!(RetrievalWeights::new(0.5, 0.6).is_err());
        assert!(RetrievalWeights::new(-0.1, 1.1).is_err());
    }

    #[test]
    fn identical_case_scores_one() {
        let r = record(CaseKind::Correct, "Extract entities", "Obama visited Hawaii.", "{}");
        let q = LexicalEmbedder::default().vector(&r.match_text());
        let s = score_case(&r.match_text(), &q, &r, RetrievalWeights::default()).unwrap();
        assert!((s.combined - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let r = record(CaseKind::Correct, "d", "i", "{}");
        let q = EmbeddingVector::zeros(3);
        assert!(matches!(
            score_case("q", &q, &r, RetrievalWeights::default()),
            Err(CaseError::DimMismatch { .. })
        ));
    }

    #[test]
    fn empty_store_retrieves_nothing() {
        let store = CaseStore::in_memory(crate::llm::LEXICAL_DIM);
        let q = LexicalEmbedder::default().vector("anything");
        let got = store
            .retrieve_top_k("anything", &q, CaseKind::Correct, TaskKind::Ner, 2, RetrievalWeights::default())
            .unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn ties_break_on_case_id() {
        let store = CaseStore::in_memory(crate::llm::LEXICAL_DIM);
        // same match text, different answers: identical scores, distinct ids
        let a = record(CaseKind::Correct, "d", "same text", r#"{"x":1}"#);
        let b = record(CaseKind::Correct, "d", "same text", r#"{"x":2}"#);
        store.add_case(a.clone()).unwrap();
        store.add_case(b.clone()).unwrap();
        let q = LexicalEmbedder::default().vector("query");
        let got = store
            .retrieve_top_k("query", &q, CaseKind::Correct, TaskKind::Ner, 2, RetrievalWeights::default())
            .unwrap();
        assert_eq!(got[0].combined, got[1].combined);
        let mut ids = vec![a.case_id, b.case_id];
        ids.sort();
        assert_eq!(got.iter().map(|s| s.case.case_id.clone()).collect::<Vec<_>>(), ids);
    }

    #[test]
    fn filters_by_kind_and_task() {
        let store = CaseStore::in_memory(crate::llm::LEXICAL_DIM);
        store.add_case(record(CaseKind::Bad, "d", "text", "{}")).unwrap();
        let mut re = record(CaseKind::Correct, "d", "text", "{}");
        re.task_kind = TaskKind::Re;
        store.add_case(re).unwrap();
        let q = LexicalEmbedder::default().vector("d\ntext");
        let got = store
            .retrieve_top_k("d\ntext", &q, CaseKind::Correct, TaskKind::Ner, 2, RetrievalWeights::default())
            .unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn add_then_self_retrieve_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let store = CaseStore::open(dir.path(), crate::llm::LEXICAL_DIM).unwrap();
        store.add_case(record(CaseKind::Correct, "other", "unrelated words", "{}")).unwrap();
        let r = record(CaseKind::Correct, "Extract entities", "Obama visited Hawaii.", r#"{"e":[]}"#);
        let (id, inserted) = store.add_case(r.clone()).unwrap();
        assert!(inserted);
        let q = LexicalEmbedder::default().vector(&r.match_text());
        let got = store
            .retrieve_top_k(&r.match_text(), &q, CaseKind::Correct, TaskKind::Ner, 2, RetrievalWeights::default())
            .unwrap();
        assert_eq!(got[0].case.case_id, id);
        assert!((got[0].combined - 1.0).abs() < 1e-12);

        let mut again = record(CaseKind::Correct, "Extract entities", "Obama visited Hawaii.", r#"{"e":[]}"#);
        again.annotation = "different reasoning".into();
        let (id2, inserted2) = store.add_case(again).unwrap();
        assert_eq!((id2, inserted2), (id, false));
        assert_eq!(store.len(CaseKind::Correct), 2);
    }

    #[test]
    fn invalid_records_rejected() {
        let store = CaseStore::in_memory(crate::llm::LEXICAL_DIM);
        let bad_json = record(CaseKind::Correct, "d", "i", "{not json");
        assert!(matches!(store.add_case(bad_json), Err(CaseError::InvalidRecord(_))));
        let mut empty_note = record(CaseKind::Correct, "d", "i", "{}");
        empty_note.annotation = " ".into();
        assert!(matches!(store.add_case(empty_note), Err(CaseError::InvalidRecord(_))));
        let mut wrong_dim = record(CaseKind::Correct, "d", "i", "{}");
        wrong_dim.embedding = EmbeddingVector::zeros(2);
        assert!(matches!(store.add_case(wrong_dim), Err(CaseError::DimMismatch { .. })));
        assert!(store.is_empty());
    }

    #[test]
    fn persistence_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store = CaseStore::open(dir.path(), crate::llm::LEXICAL_DIM).unwrap();
        store
            .add_batch(vec![
                record(CaseKind::Correct, "d1", "some input text", r#"{"a":1}"#),
                record(CaseKind::Bad, "d2", "another input", r#"{"a":2}"#),
            ])
            .unwrap();
        let reopened = CaseStore::open(dir.path(), crate::llm::LEXICAL_DIM).unwrap();
        for kind in [CaseKind::Correct, CaseKind::Bad] {
            let (a, b) = (store.cases(kind), reopened.cases(kind));
            assert_eq!(a, b);
            for (x, y) in a.iter().zip(&b) {
                let bits = |v: &EmbeddingVector| v.values.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&x.embedding), bits(&y.embedding));
            }
        }
    }

    #[test]
    fn failed_batch_leaves_store_unchanged() {
        let store = CaseStore::in_memory(crate::llm::LEXICAL_DIM);
        let good = record(CaseKind::Correct, "d", "i", "{}");
        let bad = record(CaseKind::Bad, "d", "i", "nope");
        assert!(store.add_batch(vec![good, bad]).is_err());
        assert!(store.is_empty());
    }

    #[test]
    fn max_cases_evicts_oldest() {
        let dir = tempfile::tempdir().unwrap();
        let store = CaseStore::open(dir.path(), crate::llm::LEXICAL_DIM).unwrap().with_max_cases(Some(2));
        let ids: Vec<String> = (0..3)
            .map(|i| store.add_case(record(CaseKind::Correct, "d", &format!("input {i}"), "{}")).unwrap().0)
            .collect();
        let kept: Vec<String> = store.cases(CaseKind::Correct).into_iter().map(|c| c.case_id).collect();
        assert_eq!(kept, ids[1..].to_vec());
        let reopened = CaseStore::open(dir.path(), crate::llm::LEXICAL_DIM).unwrap();
        assert_eq!(reopened.len(CaseKind::Correct), 2);
    }

    #[test]
    fn excerpt_is_truncated() {
        let long = "x".repeat(EXCERPT_CHARS + 50);
        let r = record(CaseKind::Correct, "d", &long, "{}");
        assert_eq!(r.input_excerpt.chars().count(), EXCERPT_CHARS);
    }
}
