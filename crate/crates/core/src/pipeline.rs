//! End-to-end orchestration: ingest, schema resolution, per-chunk
//! extraction with routing and reflection, case curation and merging.
//!
//! Every stage appends events to a trace. The trace is written as JSON
//! lines; apart from the `ts_ms` field it is fully determined by the inputs
//! and the model replies.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::cases::{CaseError, CaseStore};
use crate::curator::{store_unverified, update_repository, TaskOutcome};
use crate::extraction::{extract, ExtractionError, ExtractionSettings, Query};
use crate::ingest::{chunk_text, ChunkingPolicy, IngestError, TextChunk};
use crate::json::{canonical_json, is_empty_value};
use crate::llm::{
    BackendConfig, ChatBackend, Embedder, Gateway, HttpBackend, LexicalEmbedder, LlmError, RecordingBackend,
    RemoteEmbedder, ReplayBackend, RetryPolicy,
};
use crate::prompts::{PromptError, PromptSet};
use crate::reflection::{reflect, route, FinalResult, ReflectionSettings, Route};
use crate::schema::{serialize_schema, FieldSpec, OutputSchema, SchemaError, SchemaRepository, ValueKind};
use crate::schema_agent::{classify_genre, resolve_schema, save_deduced, ExtractionTask, SchemaAgentError, SchemaProvenance};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    SchemaAgent(#[from] SchemaAgentError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Cases(#[from] CaseError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("answer of chunk {chunk} has key {key:?}, which is not in the schema")]
    SchemaMismatch { chunk: usize, key: String },
    #[error("extraction failed on all {chunks} chunks")]
    AllChunksFailed { chunks: usize, trace: Vec<TraceEvent> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Remote for a live backend; lexical when replaying or recording
    /// fixtures, since embeddings are not part of a fixture.
    #[default]
    Auto,
    /// Hashed character trigrams; offline and deterministic.
    Lexical,
    /// The backend's embeddings endpoint.
    Remote,
}

impl EmbedderKind {
    pub fn is_remote(self, source: &BackendSource) -> bool {
        match self {
            EmbedderKind::Auto => matches!(source, BackendSource::Live),
            EmbedderKind::Lexical => false,
            EmbedderKind::Remote => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub backend: BackendConfig,
    pub embedder: EmbedderKind,
    pub chunking: ChunkingPolicy,
    pub extraction: ExtractionSettings,
    pub reflection: ReflectionSettings,
    /// Chunks processed at the same time.
    pub parallelism: usize,
    /// Reject answers with keys outside the schema instead of dropping them.
    pub strict_merge: bool,
    pub schemas_dir: Option<PathBuf>,
    pub cases_dir: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub max_cases: Option<usize>,
    pub save_deduced: bool,
    pub classify: bool,
    pub update_cases: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backend: BackendConfig::default(),
            embedder: EmbedderKind::default(),
            chunking: ChunkingPolicy::default(),
            extraction: ExtractionSettings::default(),
            reflection: ReflectionSettings::default(),
            parallelism: 2,
            strict_merge: false,
            schemas_dir: None,
            cases_dir: None,
            prompts_dir: None,
            max_cases: None,
            save_deduced: false,
            classify: false,
            update_cases: false,
        }
    }
}

impl PipelineConfig {
    pub const FILE_NAME: &'static str = "ke.config.json";

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.chunking.validate()?;
        self.extraction.weights.validate()?;
        self.reflection.weights.validate()?;
        let e = &self.extraction;
        if e.samples == 0 {
            return bad("extraction.samples must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&e.threshold) {
            return bad(format!("extraction.threshold must lie in [0, 1], got {}", e.threshold));
        }
        if [e.temperature, self.reflection.temperature].iter().any(|t| t.is_nan() || *t < 0.0) {
            return bad("temperatures must be >= 0".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.backend.max_concurrency == 0 {
            return bad("backend.max_concurrency must be at least 1".into());
        }
        Ok(())
    }
}

/// Where model replies come from.
#[derive(Debug, Clone, Default)]
pub enum BackendSource {
    /// Live HTTP backend from the configuration.
    #[default]
    Live,
    /// Replay recorded fixtures; unknown requests fail.
    Replay(PathBuf),
    /// Live backend, appending every exchange to a fixture file.
    Record(PathBuf),
}

/// Everything the agents share: model access, templates and repositories.
#[derive(Debug)]
pub struct Engine {
    pub gateway: Gateway,
    pub prompts: PromptSet,
    pub schemas: RwLock<SchemaRepository>,
    pub cases: CaseStore,
}

impl Engine {
    pub fn new(gateway: Gateway, prompts: PromptSet, schemas: SchemaRepository, cases: CaseStore) -> Self {
        Engine { gateway, prompts, schemas: RwLock::new(schemas), cases }
    }

    /// Builds the gateway, loads templates and opens both repositories as
    /// the configuration says.
    pub fn from_config(config: &PipelineConfig, source: &BackendSource) -> Result<Self, PipelineError> {
        let remote = config.embedder.is_remote(source);
        let embedder: Arc<dyn Embedder> = if remote {
            Arc::new(RemoteEmbedder::new(config.backend.clone())?)
        } else {
            Arc::new(LexicalEmbedder::default())
        };
        let backend: Arc<dyn ChatBackend> = match source {
            BackendSource::Live => Arc::new(HttpBackend::new(config.backend.clone())?),
            BackendSource::Replay(path) => Arc::new(ReplayBackend::load(path)?),
            BackendSource::Record(path) => {
                Arc::new(RecordingBackend::open(path, Arc::new(HttpBackend::new(config.backend.clone())?))?)
            }
        };
        let retry = RetryPolicy { max_retries: config.backend.max_retries, ..RetryPolicy::default() };
        let dim = embedder.dim();
        let gateway = Gateway::new(backend, embedder, config.backend.chat_model.clone()).with_retry(retry);
        let prompts = match &config.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::bundled(),
        };
        let schemas = match &config.schemas_dir {
            Some(dir) if dir.is_dir() => SchemaRepository::load_dir(dir)?,
            Some(dir) => {
                SchemaRepository::seed_dir(dir)?;
                SchemaRepository::load_dir(dir)?
            }
            None => SchemaRepository::bundled(),
        };
        let cases = match &config.cases_dir {
            Some(dir) => CaseStore::open(dir, dim)?,
            None => CaseStore::in_memory(dim),
        }
        .with_max_cases(config.max_cases);
        Ok(Engine::new(gateway, prompts, schemas, cases))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: usize,
    pub ts_ms: i64,
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<usize>,
    pub detail: Value,
}

impl TraceEvent {
    /// One canonical JSON line.
    pub fn to_line(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("trace events serialize"))
    }
}

pub fn trace_jsonl(events: &[TraceEvent]) -> String {
    events.iter().map(|e| e.to_line() + "\n").collect()
}

#[derive(Debug, Default)]
struct Tracer {
    events: Vec<TraceEvent>,
}

impl Tracer {
    fn push(&mut self, stage: &str, chunk: Option<usize>, detail: Value) {
        let seq = self.events.len();
        let ts_ms = chrono::Utc::now().timestamp_millis();
        self.events.push(TraceEvent { seq, ts_ms, stage: stage.to_string(), chunk, detail });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkOutcome {
    pub index: usize,
    pub span_start: usize,
    pub span_end: usize,
    pub result: Option<FinalResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub instruction: String,
    pub source_id: String,
    pub schema: OutputSchema,
    pub provenance: SchemaProvenance,
    pub schema_id: Option<String>,
    pub chunks: Vec<ChunkOutcome>,
    pub merged_answer: Value,
    pub elapsed_ms: u64,
    pub trace: Vec<TraceEvent>,
}

impl PipelineRun {
    /// The merged answer as pretty JSON with sorted keys.
    pub fn answer_json(&self) -> String {
        serde_json::to_string_pretty(&self.merged_answer).expect("answers serialize") + "\n"
    }

    pub fn trace_jsonl(&self) -> String {
        trace_jsonl(&self.trace)
    }
}

/// Result of extracting one chunk plus its buffered trace events.
struct ChunkWork {
    result: Result<FinalResult, ExtractionError>,
    events: Vec<(&'static str, Value)>,
}

fn process_chunk(
    engine: &Engine,
    config: &PipelineConfig,
    task: &ExtractionTask,
    schema: &OutputSchema,
    chunk: &TextChunk,
) -> ChunkWork {
    let mut events = Vec::new();
    let query = Query { instruction: &task.instruction, task_kind: task.task_kind, text: &chunk.text };
    let result: Result<FinalResult, ExtractionError> = (|| {
        let ex = extract(&engine.gateway, &engine.prompts, &engine.cases, &query, schema, &config.extraction)?;
        let c = &ex.consensus;
        events.push((
            "extract",
            json!({
                "agreement": c.agreement,
                "n_valid": c.n_valid,
                "n_total": c.n_total,
                "uncertain": c.uncertain,
                "examples": ex.examples_used.iter().map(|s| s.case.case_id.clone()).collect::<Vec<_>>(),
                "answer": c.answer,
            }),
        ));
        let r = route(c);
        events.push(("route", json!({ "route": r })));
        if r == Route::Accept {
            return Ok(FinalResult::accepted(c));
        }
        let fin = reflect(&engine.gateway, &engine.prompts, &engine.cases, &query, schema, c, &config.reflection)?;
        events.push((
            "reflect",
            json!({
                "reflected": fin.reflected,
                "bad_cases": fin.bad_cases_used,
                "warnings": fin.warnings,
                "answer": fin.answer,
            }),
        ));
        Ok(fin)
    })();
    if let Err(e) = &result {
        events.push(("error", json!({ "message": e.to_string() })));
    }
    ChunkWork { result, events }
}

/// Runs the whole pipeline on one task. `gold` is the reference answer used
/// for case curation; without it, `update_cases` stores unverified cases.
pub fn run_extract(
    engine: &Engine,
    task: &ExtractionTask,
    config: &PipelineConfig,
    gold: Option<&Value>,
) -> Result<PipelineRun, PipelineError> {
    config.validate()?;
    let started = std::time::Instant::now();
    let mut tracer = Tracer::default();
    let mut task = task.clone();
    let chunks = chunk_text(&task.document.text, &config.chunking);
    tracer.push(
        "ingest",
        None,
        json!({
            "source_id": task.document.source_id,
            "format": task.document.format,
            "chars": task.document.text.chars().count(),
            "chunks": chunks.len(),
        }),
    );

    if config.classify && task.schema_id.is_none() {
        let genre = classify_genre(&engine.gateway, &engine.prompts, &task.document.text)?;
        tracer.push("classify", None, json!({ "genre": genre }));
        task.constraints.insert("genre".into(), genre);
    }

    let resolved = {
        let schemas = engine.schemas.read().unwrap_or_else(|e| e.into_inner());
        resolve_schema(&schemas, &engine.gateway, &engine.prompts, &task)?
    };
    let mut schema_id = resolved.schema_id.clone();
    if resolved.provenance == SchemaProvenance::Deduced && config.save_deduced {
        if let Some(dir) = &config.schemas_dir {
            let mut schemas = engine.schemas.write().unwrap_or_else(|e| e.into_inner());
            schema_id = Some(save_deduced(&mut schemas, dir, &task, &resolved.schema)?);
        }
    }
    let schema = resolved.schema;
    tracer.push(
        "schema",
        None,
        json!({
            "provenance": resolved.provenance,
            "schema_id": schema_id,
            "attempts": resolved.attempts,
            "fields": schema.top_level_names().collect::<Vec<_>>(),
        }),
    );

    let works = run_chunks(engine, config, &task, &schema, &chunks);
    let mut outcomes = Vec::with_capacity(chunks.len());
    for (chunk, work) in chunks.iter().zip(works) {
        for (stage, detail) in work.events {
            tracer.push(stage, Some(chunk.index), detail);
        }
        let (result, error) = match work.result {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        outcomes.push(ChunkOutcome { index: chunk.index, span_start: chunk.span_start, span_end: chunk.span_end, result, error });
    }

    if config.update_cases {
        curate(engine, &task, &schema, &chunks, &outcomes, gold, &mut tracer);
    }

    let ok: Vec<(usize, &FinalResult)> = outcomes.iter().filter_map(|o| o.result.as_ref().map(|r| (o.index, r))).collect();
    if ok.is_empty() {
        tracer.push("merge", None, json!({ "chunks_ok": 0, "chunks_failed": outcomes.len() }));
        return Err(PipelineError::AllChunksFailed { chunks: outcomes.len(), trace: tracer.events });
    }
    let (merged, warnings) = merge_indexed(&ok, &schema, config.strict_merge)?;
    tracer.push(
        "merge",
        None,
        json!({ "chunks_ok": ok.len(), "chunks_failed": outcomes.len() - ok.len(), "warnings": warnings }),
    );

    Ok(PipelineRun {
        instruction: task.instruction.clone(),
        source_id: task.document.source_id.clone(),
        schema,
        provenance: resolved.provenance,
        schema_id,
        chunks: outcomes,
        merged_answer: merged,
        elapsed_ms: started.elapsed().as_millis() as u64,
        trace: tracer.events,
    })
}

fn run_chunks(
    engine: &Engine,
    config: &PipelineConfig,
    task: &ExtractionTask,
    schema: &OutputSchema,
    chunks: &[TextChunk],
) -> Vec<ChunkWork> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ChunkWork>>> = Mutex::new((0..chunks.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..config.parallelism.clamp(1, chunks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= chunks.len() {
                    break;
                }
                let work = process_chunk(engine, config, task, schema, &chunks[i]);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(work);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|w| w.expect("every chunk ran"))
        .collect()
}

fn curate(
    engine: &Engine,
    task: &ExtractionTask,
    schema: &OutputSchema,
    chunks: &[TextChunk],
    outcomes: &[ChunkOutcome],
    gold: Option<&Value>,
    tracer: &mut Tracer,
) {
    let schema_json = serialize_schema(schema);
    for (chunk, outcome) in chunks.iter().zip(outcomes) {
        let Some(result) = &outcome.result else { continue };
        let (reference, verified) = match gold {
            Some(g) => (g.clone(), true),
            None => (result.answer.clone(), false),
        };
        let o = TaskOutcome::new(task.task_kind, &task.instruction, &chunk.text, &schema_json, result.answer.clone(), reference);
        let res = if verified {
            update_repository(&engine.gateway, &engine.prompts, &engine.cases, &o)
        } else {
            store_unverified(&engine.gateway, &engine.prompts, &engine.cases, &o).map(|n| (n, 0))
        };
        match res {
            Ok((c, b)) => tracer.push(
                "curate",
                Some(chunk.index),
                json!({ "verified": verified, "correct": o.correct, "added_correct": c, "added_bad": b }),
            ),
            Err(e) => tracer.push("error", Some(chunk.index), json!({ "stage": "curate", "message": e.to_string() })),
        }
    }
}

/// Combines per-chunk answers: lists are unioned in first-seen order,
/// scalars take the first non-empty value, records merge field by field.
/// Returns the merged answer and any warnings about dropped keys.
pub fn merge_chunk_results(
    results: &[FinalResult],
    schema: &OutputSchema,
    strict: bool,
) -> Result<(Value, Vec<String>), PipelineError> {
    let indexed: Vec<(usize, &FinalResult)> = results.iter().enumerate().collect();
    merge_indexed(&indexed, schema, strict)
}

fn merge_indexed(
    results: &[(usize, &FinalResult)],
    schema: &OutputSchema,
    strict: bool,
) -> Result<(Value, Vec<String>), PipelineError> {
    let mut warnings = Vec::new();
    let mut merged = Map::new();
    for (chunk, result) in results {
        let Value::Object(answer) = &result.answer else {
            warnings.push(format!("chunk {chunk}: answer is not an object; skipped"));
            continue;
        };
        for (key, value) in answer {
            let Some(field) = schema.field(key) else {
                if strict {
                    return Err(PipelineError::SchemaMismatch { chunk: *chunk, key: key.clone() });
                }
                let w = format!("chunk {chunk}: dropped key {key:?} not in the schema");
                log::warn!("{w}");
                warnings.push(w);
                continue;
            };
            let slot = merged.entry(key.clone()).or_insert(Value::Null);
            merge_field(slot, value, Some(field));
        }
    }
    Ok((Value::Object(merged), warnings))
}

fn merge_field(acc: &mut Value, incoming: &Value, field: Option<&FieldSpec>) {
    let kind = field.map(|f| f.kind);
    let is_list = match kind {
        Some(k) => k.is_list(),
        None => acc.is_array() || incoming.is_array(),
    };
    if acc.is_null() {
        *acc = if is_list && !incoming.is_array() && !is_empty_value(incoming) {
            Value::Array(vec![incoming.clone()])
        } else {
            incoming.clone()
        };
        return;
    }
    if is_list {
        let items: Vec<Value> = match incoming {
            Value::Array(items) => items.clone(),
            v if is_empty_value(v) => Vec::new(),
            v => vec![v.clone()],
        };
        if !acc.is_array() {
            let prev = std::mem::take(acc);
            *acc = Value::Array(if is_empty_value(&prev) { Vec::new() } else { vec![prev] });
        }
        let list = acc.as_array_mut().expect("made an array above");
        let mut seen: Vec<String> = list.iter().map(canonical_json).collect();
        for item in items {
            let key = canonical_json(&item);
            if !seen.contains(&key) {
                seen.push(key);
                list.push(item);
            }
        }
        return;
    }
    if kind == Some(ValueKind::Record) {
        if let (Value::Object(a), Value::Object(b)) = (&mut *acc, incoming) {
            for (k, v) in b {
                let child = field.and_then(|f| f.children.iter().find(|c| &c.name == k));
                merge_field(a.entry(k.clone()).or_insert(Value::Null), v, child);
            }
            return;
        }
    }
    if is_empty_value(acc) && !is_empty_value(incoming) {
        *acc = incoming.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::FieldSpec;
    use proptest::prelude::*;

    fn result(answer: Value) -> FinalResult {
        FinalResult { answer, reflected: false, preliminary_agreement: 1.0, bad_cases_used: vec![], warnings: vec![] }
    }

    fn schema() -> OutputSchema {
        OutputSchema {
            title: "t".into(),
            fields: vec![
                FieldSpec::nested("entities", ValueKind::TextList, "", vec![]),
                FieldSpec::text("background_setting", ""),
                FieldSpec::nested(
                    "meta",
                    ValueKind::Record,
                    "",
                    vec![FieldSpec::text("place", ""), FieldSpec::nested("tags", ValueKind::TextList, "", vec![])],
                ),
            ],
        }
    }

    fn merge(answers: &[Value]) -> Value {
        let rs: Vec<FinalResult> = answers.iter().cloned().map(result).collect();
        merge_chunk_results(&rs, &schema(), false).unwrap().0
    }

    #[test]
    fn single_chunk_is_identity() {
        let a = json!({"entities": ["x", "y"], "background_setting": "", "meta": {"place": "p", "tags": []}});
        assert_eq!(merge(std::slice::from_ref(&a)), a);
    }

    #[test]
    fn list_union_in_first_seen_order() {
        assert_eq!(merge(&[json!({"entities": ["x"]}), json!({"entities": ["y", "x"]})]), json!({"entities": ["x", "y"]}));
    }

    #[test]
    fn first_non_empty_scalar() {
        let got = merge(&[json!({"background_setting": ""}), json!({"background_setting": "Misty harbour town"}), json!({"background_setting": "later"})]);
        assert_eq!(got, json!({"background_setting": "Misty harbour town"}));
    }

    #[test]
    fn records_merge_field_wise() {
        let got = merge(&[
            json!({"meta": {"place": "", "tags": ["a"]}}),
            json!({"meta": {"place": "harbour", "tags": ["b", "a"]}}),
        ]);
        assert_eq!(got, json!({"meta": {"place": "harbour", "tags": ["a", "b"]}}));
    }

    #[test]
    fn unknown_keys() {
        let rs = vec![result(json!({"entities": ["x"], "extra": 1}))];
        let (v, w) = merge_chunk_results(&rs, &schema(), false).unwrap();
        assert_eq!((v, w.len()), (json!({"entities": ["x"]}), 1));
        assert!(matches!(merge_chunk_results(&rs, &schema(), true), Err(PipelineError::SchemaMismatch { chunk: 0, .. })));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let mut c = PipelineConfig { cases_dir: Some("cases".into()), ..PipelineConfig::default() };
        c.extraction.threshold = 0.75;
        let back: PipelineConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"parallelism": 4, "extraction": {"samples": 5}}"#).unwrap();
        assert_eq!((partial.parallelism, partial.extraction.samples, partial.extraction.threshold), (4, 5, 0.6));
        c.extraction.samples = 0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn list_union_is_associative(a in proptest::collection::vec("[a-d]", 0..5), b in proptest::collection::vec("[a-d]", 0..5), c in proptest::collection::vec("[a-d]", 0..5)) {
            let v = |xs: &Vec<String>| json!({"entities": xs});
            let left = merge(&[merge(&[v(&a), v(&b)]), v(&c)]);
            let right = merge(&[v(&a), merge(&[v(&b), v(&c)])]);
            let flat = merge(&[v(&a), v(&b), v(&c)]);
            prop_assert_eq!(&left, &right);
            prop_assert_eq!(&left, &flat);
        }
    }
}
