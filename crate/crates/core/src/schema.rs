//! Output schemas and the schema repository.
//!
//! A schema definition file is a single JSON object:
//!
//! ```json
//! {"id": "news_report", "task_kind": "Custom", "scenario_tags": ["news"],
//!  "description": "...", "title": "...",
//!  "fields": [{"name": "headline", "kind": "text", "description": "..."}]}
//! ```
//!
//! The same `fields` layout, wrapped as `{"title", "fields"}`, is what goes
//! into prompts (see [`serialize_schema`]).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::json::canonical_json;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("malformed schema definition: {0}")]
    MalformedDefinition(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema file {path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("duplicate schema id {0}")]
    DuplicateId(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "EE")]
    Ee,
    Triple,
    Custom,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ner => "NER",
            TaskKind::Re => "RE",
            TaskKind::Ee => "EE",
            TaskKind::Triple => "Triple",
            TaskKind::Custom => "Custom",
        }
    }

    /// Id of the bundled default schema for this kind, if any.
    pub fn default_schema_id(self) -> Option<&'static str> {
        match self {
            TaskKind::Ner => Some("default_ner"),
            TaskKind::Re => Some("default_re"),
            TaskKind::Ee => Some("default_ee"),
            TaskKind::Triple => Some("default_re"),
            TaskKind::Custom => None,
        }
    }

    /// Entity, triple and event lists are unordered collections; answers for
    /// these kinds compare their top-level lists as sets.
    pub fn lists_are_sets(self) -> bool {
        !matches!(self, TaskKind::Custom)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ner" => Ok(TaskKind::Ner),
            "re" => Ok(TaskKind::Re),
            "ee" => Ok(TaskKind::Ee),
            "triple" => Ok(TaskKind::Triple),
            "custom" => Ok(TaskKind::Custom),
            other => Err(SchemaError::InvalidSchema(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Text,
    TextList,
    Record,
    RecordList,
}

impl ValueKind {
    pub fn has_children(self) -> bool {
        matches!(self, ValueKind::Record | ValueKind::RecordList)
    }

    pub fn is_list(self) -> bool {
        matches!(self, ValueKind::TextList | ValueKind::RecordList)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub kind: ValueKind,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<FieldSpec>,
}

impl FieldSpec {
    pub fn text(name: &str, description: &str) -> Self {
        FieldSpec { name: name.into(), kind: ValueKind::Text, description: description.into(), children: Vec::new() }
    }

    pub fn nested(name: &str, kind: ValueKind, description: &str, children: Vec<FieldSpec>) -> Self {
        FieldSpec { name: name.into(), kind, description: description.into(), children }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSchema {
    pub title: String,
    pub fields: Vec<FieldSpec>,
}

impl OutputSchema {
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.fields.is_empty() {
            return Err(SchemaError::InvalidSchema("schema has no fields".into()));
        }
        validate_fields(&self.fields, "")
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn top_level_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }
}

fn validate_fields(fields: &[FieldSpec], path: &str) -> Result<(), SchemaError> {
    let mut seen = HashSet::new();
    for f in fields {
        let here = if path.is_empty() { f.name.clone() } else { format!("{path}.{}", f.name) };
        if !is_identifier(&f.name) {
            return Err(SchemaError::InvalidSchema(format!("field name {here:?} is not a lowercase identifier")));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(SchemaError::InvalidSchema(format!("duplicate field name {here:?}")));
        }
        match (f.kind.has_children(), f.children.is_empty()) {
            (true, true) => {
                return Err(SchemaError::InvalidSchema(format!("field {here:?} is a record but has no children")))
            }
            (false, false) => {
                return Err(SchemaError::InvalidSchema(format!("field {here:?} is not a record but has children")))
            }
            _ => {}
        }
        validate_fields(&f.children, &here)?;
    }
    Ok(())
}

/// `[a-z][a-z0-9_]*`
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some('a'..='z')) && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaRecord {
    pub id: String,
    pub task_kind: TaskKind,
    pub scenario_tags: Vec<String>,
    pub description: String,
    pub schema: OutputSchema,
}

/// On-disk layout of a definition file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefinitionFile {
    id: String,
    task_kind: TaskKind,
    #[serde(default)]
    scenario_tags: Vec<String>,
    #[serde(default)]
    description: String,
    #[serde(default)]
    title: Option<String>,
    fields: Vec<FieldSpec>,
}

/// Canonical prompt form of a schema: `{"title":..,"fields":[..]}` with a
/// fixed key order and no insignificant whitespace.
pub fn serialize_schema(schema: &OutputSchema) -> String {
    serde_json::to_string(schema).expect("schema serialization cannot fail")
}

/// Parses the prompt form produced by [`serialize_schema`] (also the shape
/// a model is asked to reply with when deducing a schema).
pub fn parse_output_schema(value: &Value) -> Result<OutputSchema, SchemaError> {
    let schema: OutputSchema =
        serde_json::from_value(value.clone()).map_err(|e| SchemaError::MalformedDefinition(e.to_string()))?;
    schema.validate()?;
    Ok(schema)
}

/// Parses and validates a schema definition file.
pub fn parse_schema_definition(text: &str) -> Result<SchemaRecord, SchemaError> {
    let file: DefinitionFile =
        serde_json::from_str(text).map_err(|e| SchemaError::MalformedDefinition(e.to_string()))?;
    if file.id.trim().is_empty() {
        return Err(SchemaError::InvalidSchema("empty id".into()));
    }
    let record = SchemaRecord {
        schema: OutputSchema { title: file.title.unwrap_or_else(|| file.id.clone()), fields: file.fields },
        id: file.id,
        task_kind: file.task_kind,
        scenario_tags: file.scenario_tags,
        description: file.description,
    };
    record.schema.validate()?;
    Ok(record)
}

/// Definition-file form of a record with keys sorted and no whitespace.
pub fn serialize_record(record: &SchemaRecord) -> String {
    canonical_json(&record_value(record))
}

/// Indented definition-file form, for writing files people will edit.
pub fn serialize_record_pretty(record: &SchemaRecord) -> String {
    serde_json::to_string_pretty(&record_value(record)).expect("schema serialization cannot fail")
}

fn record_value(record: &SchemaRecord) -> Value {
    serde_json::to_value(DefinitionFile {
        id: record.id.clone(),
        task_kind: record.task_kind,
        scenario_tags: record.scenario_tags.clone(),
        description: record.description.clone(),
        title: Some(record.schema.title.clone()),
        fields: record.schema.fields.clone(),
    })
    .expect("schema serialization cannot fail")
}

/// Canonical text of an arbitrary definition document, for comparing a
/// file against the serialization of what was parsed from it.
pub fn canonicalize_definition(text: &str) -> Result<String, SchemaError> {
    let value: Value = serde_json::from_str(text).map_err(|e| SchemaError::MalformedDefinition(e.to_string()))?;
    Ok(canonical_json(&value))
}

const BUNDLED: &[(&str, &str)] = &[
    ("academic_paper", include_str!("../schemas/academic_paper.json")),
    ("default_ee", include_str!("../schemas/default_ee.json")),
    ("default_ner", include_str!("../schemas/default_ner.json")),
    ("default_re", include_str!("../schemas/default_re.json")),
    ("news_report", include_str!("../schemas/news_report.json")),
];

/// Raw text of every bundled definition file, keyed by id.
pub fn bundled_definitions() -> impl Iterator<Item = (&'static str, &'static str)> {
    BUNDLED.iter().copied()
}

/// The pre-defined schemas, immutable once loaded.
#[derive(Debug, Clone, Default)]
pub struct SchemaRepository {
    records: BTreeMap<String, SchemaRecord>,
}

impl SchemaRepository {
    pub fn bundled() -> Self {
        let mut repo = SchemaRepository::default();
        for (id, text) in BUNDLED {
            let record = parse_schema_definition(text).unwrap_or_else(|e| panic!("bundled schema {id}: {e}"));
            repo.insert(record).expect("bundled ids are unique");
        }
        repo
    }

    /// Loads every `*.json` file in `dir`. Any invalid file fails the load,
    /// as does a file whose name differs from `<id>.json`.
    pub fn load_dir(dir: &Path) -> Result<Self, SchemaError> {
        let io_err = |source| SchemaError::Io { path: dir.display().to_string(), source };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let mut repo = SchemaRepository::default();
        for path in paths {
            let bad = |reason: String| SchemaError::BadFile { path: path.display().to_string(), reason };
            let text = fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
            let record = parse_schema_definition(&text).map_err(|e| bad(e.to_string()))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if stem != record.id {
                return Err(bad(format!("file name must be {}.json", record.id)));
            }
            repo.insert(record)?;
        }
        Ok(repo)
    }

    /// Writes the bundled definitions into `dir` (creating it) unless a file
    /// with the same name already exists.
    pub fn seed_dir(dir: &Path) -> Result<(), SchemaError> {
        fs::create_dir_all(dir).map_err(|source| SchemaError::Io { path: dir.display().to_string(), source })?;
        for (id, text) in BUNDLED {
            let path = dir.join(format!("{id}.json"));
            if !path.exists() {
                fs::write(&path, text).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, record: SchemaRecord) -> Result<(), SchemaError> {
        if self.records.contains_key(&record.id) {
            return Err(SchemaError::DuplicateId(record.id));
        }
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SchemaRecord> {
        self.records.get(id)
    }

    pub fn contains_schema(&self, schema: &OutputSchema) -> bool {
        self.records.values().any(|r| &r.schema == schema)
    }

    /// Records in id order.
    pub fn records(&self) -> impl Iterator<Item = &SchemaRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Picks the record with the largest scenario-tag overlap.
    ///
    /// Records of the requested kind are eligible; a `Custom` request
    /// considers every record. Ties go to the smallest id. With zero overlap
    /// the kind's default record is returned, if there is one.
    pub fn lookup(&self, task_kind: TaskKind, scenario_tags: &[String]) -> Option<&SchemaRecord> {
        let wanted: HashSet<String> = scenario_tags.iter().map(|t| t.to_lowercase()).collect();
        let mut best: Option<(usize, &SchemaRecord)> = None;
        // BTreeMap iteration is id-ascending, so strict `>` keeps the smallest id on ties
        for record in self.records.values() {
            if task_kind != TaskKind::Custom && record.task_kind != task_kind {
                continue;
            }
            let overlap = record
                .scenario_tags
                .iter()
                .map(|t| t.to_lowercase())
                .collect::<HashSet<_>>()
                .intersection(&wanted)
                .count();
            if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, record));
            }
        }
        best.map(|(_, r)| r)
            .or_else(|| task_kind.default_schema_id().and_then(|id| self.records.get(id)))
    }
}
