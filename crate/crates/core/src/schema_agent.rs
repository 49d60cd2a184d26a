//! Chooses the output schema for a task: an explicit id, a repository match
//! on instruction keywords, or a schema deduced by the model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cases::truncate_chars;
use crate::ingest::SourceDocument;
use crate::json::parse_relaxed_object;
use crate::llm::{ChatMessage, Gateway, LlmError, SamplingParams};
use crate::prompts::PromptSet;
use crate::schema::{parse_output_schema, serialize_record_pretty, OutputSchema, SchemaRecord, SchemaRepository, TaskKind};

/// Characters of source text shown to the model when deducing a schema.
pub const SAMPLE_CHARS: usize = 1000;
/// Deduction attempts before giving up (the first try plus one repair).
pub const MAX_ATTEMPTS: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum SchemaAgentError {
    #[error("no schema with id {0:?}")]
    UnknownSchemaId(String),
    #[error("a custom task needs a non-empty instruction")]
    EmptyInstruction,
    #[error("could not obtain a valid schema after {attempts} attempts: {last_error}")]
    DeductionParseFailure { attempts: u32, last_error: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("could not save deduced schema to {path}: {reason}")]
    Save { path: String, reason: String },
}

#[derive(Debug, Clone)]
pub struct ExtractionTask {
    pub instruction: String,
    pub task_kind: TaskKind,
    pub schema_id: Option<String>,
    pub document: SourceDocument,
    pub constraints: BTreeMap<String, String>,
}

impl ExtractionTask {
    pub fn new(instruction: impl Into<String>, task_kind: TaskKind, document: SourceDocument) -> Self {
        ExtractionTask {
            instruction: instruction.into(),
            task_kind,
            schema_id: None,
            document,
            constraints: BTreeMap::new(),
        }
    }

    pub fn with_schema_id(mut self, id: impl Into<String>) -> Self {
        self.schema_id = Some(id.into());
        self
    }

    pub fn validate(&self) -> Result<(), SchemaAgentError> {
        if self.task_kind == TaskKind::Custom && self.instruction.trim().is_empty() && self.schema_id.is_none() {
            return Err(SchemaAgentError::EmptyInstruction);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaProvenance {
    UserSpecified,
    RepositoryMatch,
    Deduced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSchema {
    pub schema: OutputSchema,
    pub provenance: SchemaProvenance,
    /// Repository id, when the schema came from (or was saved to) the repository.
    pub schema_id: Option<String>,
    /// Model calls spent on deduction; 0 when no deduction happened.
    pub attempts: u32,
}

/// Lowercase alphanumeric tokens of the instruction and, if present, of the
/// `genre` constraint.
pub fn instruction_tags(task: &ExtractionTask) -> Vec<String> {
    let mut text = task.instruction.clone();
    if let Some(genre) = task.constraints.get("genre") {
        text.push(' ');
        text.push_str(genre);
    }
    tokens(&text)
}

fn tokens(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let t = t.to_lowercase();
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

pub fn resolve_schema(
    repository: &SchemaRepository,
    gateway: &Gateway,
    prompts: &PromptSet,
    task: &ExtractionTask,
) -> Result<ResolvedSchema, SchemaAgentError> {
    task.validate()?;
    if let Some(id) = &task.schema_id {
        let record = repository.get(id).ok_or_else(|| SchemaAgentError::UnknownSchemaId(id.clone()))?;
        return Ok(ResolvedSchema {
            schema: record.schema.clone(),
            provenance: SchemaProvenance::UserSpecified,
            schema_id: Some(record.id.clone()),
            attempts: 0,
        });
    }
    if let Some(record) = repository.lookup(task.task_kind, &instruction_tags(task)) {
        return Ok(ResolvedSchema {
            schema: record.schema.clone(),
            provenance: SchemaProvenance::RepositoryMatch,
            schema_id: Some(record.id.clone()),
            attempts: 0,
        });
    }
    let (schema, attempts) = deduce_schema(gateway, prompts, &task.instruction, &task.document.text)?;
    let existing = repository.records().find(|r| r.schema == schema).map(|r| r.id.clone());
    let provenance = if existing.is_some() { SchemaProvenance::RepositoryMatch } else { SchemaProvenance::Deduced };
    Ok(ResolvedSchema { schema, provenance, schema_id: existing, attempts })
}

fn parse_reply(reply: &str) -> Result<OutputSchema, String> {
    let mut value = parse_relaxed_object(reply)?;
    if let Value::Object(map) = &mut value {
        map.entry("title").or_insert_with(|| Value::String("Deduced schema".into()));
    }
    parse_output_schema(&value).map_err(|e| e.to_string())
}

/// Asks the model for a schema definition; a reply that does not parse is
/// answered once with the parse error. Returns the schema and the number
/// of model calls made.
pub fn deduce_schema(
    gateway: &Gateway,
    prompts: &PromptSet,
    instruction: &str,
    sample_text: &str,
) -> Result<(OutputSchema, u32), SchemaAgentError> {
    let t = &prompts.schema_deduce;
    let mut messages = vec![
        ChatMessage::system(t.render("system", &[])),
        ChatMessage::user(t.render(
            "user",
            &[("instruction", instruction), ("text", truncate_chars(sample_text, SAMPLE_CHARS))],
        )),
    ];
    let mut last_error = String::new();
    for attempt in 1..=MAX_ATTEMPTS {
        let reply = gateway.chat(messages.clone(), SamplingParams::single(0.0, 2048))?;
        let text = &reply.texts[0];
        match parse_reply(text) {
            Ok(schema) => return Ok((schema, attempt)),
            Err(e) => {
                log::warn!("schema deduction attempt {attempt} unusable: {e}");
                messages.push(ChatMessage::assistant(text.clone()));
                messages.push(ChatMessage::user(t.render("retry", &[("error", &e)])));
                last_error = e;
            }
        }
    }
    Err(SchemaAgentError::DeductionParseFailure { attempts: MAX_ATTEMPTS, last_error })
}

/// A short free-text genre label such as "Politics News Report".
pub fn classify_genre(gateway: &Gateway, prompts: &PromptSet, text: &str) -> Result<String, SchemaAgentError> {
    let t = &prompts.genre_classify;
    let messages = vec![
        ChatMessage::system(t.render("system", &[])),
        ChatMessage::user(t.render("user", &[("text", truncate_chars(text, SAMPLE_CHARS))])),
    ];
    let reply = gateway.chat(messages, SamplingParams::single(0.0, 64))?;
    Ok(reply.texts[0].lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").trim_matches('"').to_string())
}

/// `deduced_<slug of the instruction>`
pub fn deduced_id(instruction: &str) -> String {
    let slug: String = tokens(instruction)
        .join("_")
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '_')
        .take(60)
        .collect();
    match slug.trim_matches('_') {
        "" => "deduced_schema".to_string(),
        s => format!("deduced_{s}"),
    }
}

/// Adds a deduced schema to the repository and writes `<dir>/<id>.json`.
pub fn save_deduced(
    repository: &mut SchemaRepository,
    dir: &Path,
    task: &ExtractionTask,
    schema: &OutputSchema,
) -> Result<String, SchemaAgentError> {
    let id = deduced_id(&task.instruction);
    let record = SchemaRecord {
        id: id.clone(),
        task_kind: task.task_kind,
        scenario_tags: instruction_tags(task),
        description: format!("Deduced from: {}", task.instruction),
        schema: schema.clone(),
    };
    let path: PathBuf = dir.join(format!("{id}.json"));
    let err = |reason: String| SchemaAgentError::Save { path: path.display().to_string(), reason };
    fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
    fs::write(&path, serialize_record_pretty(&record)).map_err(|e| err(e.to_string()))?;
    if repository.get(&id).is_none() {
        repository.insert(record).map_err(|e| err(e.to_string()))?;
    }
    Ok(id)
}
