//! Benchmark loading, set-based scoring and ablation runs.
//!
//! Two dataset formats are read:
//!
//! * CrossNER-style column files: `token<TAB>tag` per line with BIO tags,
//!   sentences separated by blank lines.
//! * NYT11-style JSON lines: `{"text": .., "triples": [{"head", "relation", "tail"}]}`.
//!
//! Entities are scored as `(type, mention)` pairs and relations as
//! `(head, relation, tail)` triples, after case folding and whitespace
//! collapsing. Metrics are micro-averaged.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cases::CaseStore;
use crate::extraction::{extract, ExtractionSettings, Query};
use crate::llm::Gateway;
use crate::prompts::PromptSet;
use crate::reflection::{reflect, route, ReflectionSettings, Route};
use crate::pipeline::Engine;
use crate::schema::{OutputSchema, TaskKind};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{path}:{line}: {reason}")]
    MalformedLine { path: String, line: usize, reason: String },
    #[error("could not read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("no ablation modes given")]
    NoModes,
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
    #[error("schema {0} is not in the repository")]
    MissingSchema(String),
}

/// A tagged entity in token coordinates, `start..end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldInstance {
    pub text: String,
    /// `(type, mention)`
    pub ner_gold: BTreeSet<(String, String)>,
    /// `(head, relation, tail)`
    pub re_gold: BTreeSet<(String, String, String)>,
    pub domain_tag: String,
    /// Token spans behind `ner_gold`, kept so column files can be rewritten.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ner_spans: Vec<EntitySpan>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Metrics { tp, fp, fn_, precision, recall, f1 }
    }

    /// Sums counts, then recomputes the ratios.
    pub fn micro<'a>(parts: impl IntoIterator<Item = &'a Metrics>) -> Self {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for m in parts {
            tp += m.tp;
            fp += m.fp;
            fn_ += m.fn_;
        }
        Metrics::from_counts(tp, fp, fn_)
    }
}

/// Case folding plus whitespace collapsing.
pub fn normalize_item(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn score_set<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Metrics {
    let tp = pred.intersection(gold).count();
    Metrics::from_counts(tp, pred.len() - tp, gold.len() - tp)
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> EvalError {
    EvalError::MalformedLine { path: path.display().to_string(), line, reason: reason.into() }
}

fn read(path: &Path) -> Result<String, EvalError> {
    fs::read_to_string(path).map_err(|e| EvalError::Io { path: path.display().to_string(), reason: e.to_string() })
}

fn domain_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_crossner(path: &Path) -> Result<Vec<GoldInstance>, EvalError> {
    parse_crossner(&read(path)?, path)
}

/// Parses column-format text; `path` is used for messages and the domain tag.
pub fn parse_crossner(content: &str, path: &Path) -> Result<Vec<GoldInstance>, EvalError> {
    let domain = domain_of(path);
    let mut out = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut spans: Vec<EntitySpan> = Vec::new();
    let flush = |tokens: &mut Vec<String>, spans: &mut Vec<EntitySpan>, out: &mut Vec<GoldInstance>| {
        if tokens.is_empty() {
            return;
        }
        let ner_gold = spans.iter().map(|s| (s.label.clone(), tokens[s.start..s.end].join(" "))).collect();
        out.push(GoldInstance {
            text: tokens.join(" "),
            ner_gold,
            re_gold: BTreeSet::new(),
            domain_tag: domain.clone(),
            ner_spans: std::mem::take(spans),
        });
        tokens.clear();
    };
    for (i, raw) in content.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut spans, &mut out);
            continue;
        }
        let (token, tag) = line.rsplit_once('\t').ok_or_else(|| malformed(path, n, "expected token<TAB>tag"))?;
        let (token, tag) = (token.trim(), tag.trim());
        if token.is_empty() || token.contains(char::is_whitespace) {
            return Err(malformed(path, n, format!("bad token {token:?}")));
        }
        let idx = tokens.len();
        tokens.push(token.to_string());
        if tag == "O" {
            continue;
        }
        let (prefix, label) = tag.split_once('-').ok_or_else(|| malformed(path, n, format!("bad tag {tag:?}")))?;
        if label.is_empty() {
            return Err(malformed(path, n, format!("tag {tag:?} has no type")));
        }
        match prefix {
            "I" if spans.last().is_some_and(|s| s.end == idx && s.label == label) => {
                spans.last_mut().expect("checked above").end = idx + 1;
            }
            // an I- tag that does not continue an entity opens one
            "B" | "I" => spans.push(EntitySpan { start: idx, end: idx + 1, label: label.to_string() }),
            _ => return Err(malformed(path, n, format!("bad tag {tag:?}"))),
        }
    }
    flush(&mut tokens, &mut spans, &mut out);
    Ok(out)
}

/// Writes instances back in column format (requires `ner_spans`).
pub fn write_crossner(instances: &[GoldInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let tokens: Vec<&str> = inst.text.split(' ').collect();
        let mut tags = vec!["O".to_string(); tokens.len()];
        for s in &inst.ner_spans {
            for (i, tag) in tags.iter_mut().enumerate().take(s.end).skip(s.start) {
                *tag = format!("{}-{}", if i == s.start { "B" } else { "I" }, s.label);
            }
        }
        for (t, tag) in tokens.iter().zip(&tags) {
            let _ = writeln!(out, "{t}\t{tag}");
        }
        out.push('\n');
    }
    out
}

pub fn load_nyt11(path: &Path) -> Result<Vec<GoldInstance>, EvalError> {
    parse_nyt11(&read(path)?, path)
}

pub fn parse_nyt11(content: &str, path: &Path) -> Result<Vec<GoldInstance>, EvalError> {
    let domain = domain_of(path);
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| malformed(path, n, e.to_string()))?;
        let text = v.get("text").and_then(Value::as_str).ok_or_else(|| malformed(path, n, "missing \"text\""))?;
        let triples = v.get("triples").and_then(Value::as_array).ok_or_else(|| malformed(path, n, "missing \"triples\""))?;
        let mut re_gold = BTreeSet::new();
        for t in triples {
            let field = |k: &str| {
                t.get(k).and_then(Value::as_str).map(str::to_string).ok_or_else(|| malformed(path, n, format!("triple missing {k:?}")))
            };
            let triple = (field("head")?, field("relation")?, field("tail")?);
            for m in [&triple.0, &triple.2] {
                if !text.contains(m.as_str()) {
                    log::warn!("{}:{n}: {m:?} does not occur in the text", path.display());
                }
            }
            re_gold.insert(triple);
        }
        out.push(GoldInstance {
            text: text.to_string(),
            ner_gold: BTreeSet::new(),
            re_gold,
            domain_tag: domain.clone(),
            ner_spans: Vec::new(),
        });
    }
    Ok(out)
}

pub fn write_nyt11(instances: &[GoldInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let triples: Vec<Value> =
            inst.re_gold.iter().map(|(h, r, t)| json!({"head": h, "relation": r, "tail": t})).collect();
        let _ = writeln!(out, "{}", json!({"text": inst.text, "triples": triples}));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    CrossNer,
    Nyt11,
}

impl Dataset {
    pub fn task_kind(self) -> TaskKind {
        match self {
            Dataset::CrossNer => TaskKind::Ner,
            Dataset::Nyt11 => TaskKind::Re,
        }
    }

    pub fn default_instruction(self) -> &'static str {
        match self {
            Dataset::CrossNer => "Extract all named entities from the text, with their types.",
            Dataset::Nyt11 => "Extract all relation triples (head, relation, tail) stated in the text.",
        }
    }

    pub fn load(self, path: &Path) -> Result<Vec<GoldInstance>, EvalError> {
        match self {
            Dataset::CrossNer => load_crossner(path),
            Dataset::Nyt11 => load_nyt11(path),
        }
    }

    /// Normalized gold tuples for scoring.
    pub fn gold(self, inst: &GoldInstance) -> BTreeSet<Vec<String>> {
        match self {
            Dataset::CrossNer => inst.ner_gold.iter().map(|(t, m)| vec![normalize_item(t), normalize_item(m)]).collect(),
            Dataset::Nyt11 => inst
                .re_gold
                .iter()
                .map(|(h, r, t)| vec![normalize_item(h), normalize_item(r), normalize_item(t)])
                .collect(),
        }
    }

    /// Normalized predicted tuples; items of the wrong shape are skipped.
    pub fn predicted(self, answer: &Value) -> BTreeSet<Vec<String>> {
        let (list, keys): (&str, &[&str]) = match self {
            Dataset::CrossNer => ("entities", &["type", "mention"]),
            Dataset::Nyt11 => ("triples", &["head", "relation", "tail"]),
        };
        answer
            .get(list)
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
            .filter_map(|item| keys.iter().map(|k| item.get(*k).and_then(Value::as_str).map(normalize_item)).collect())
            .collect()
    }
}

impl FromStr for Dataset {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "crossner" => Ok(Dataset::CrossNer),
            "nyt11" | "nyt" => Ok(Dataset::Nyt11),
            other => Err(EvalError::Unknown { what: "dataset", value: other.to_string() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Base,
    WithRetrieval,
    WithRetrievalAndReflection,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] =
        [AblationMode::Base, AblationMode::WithRetrieval, AblationMode::WithRetrievalAndReflection];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Base => "base",
            AblationMode::WithRetrieval => "with_retrieval",
            AblationMode::WithRetrievalAndReflection => "with_retrieval_and_reflection",
        }
    }

    pub fn retrieval(self) -> bool {
        self != AblationMode::Base
    }

    pub fn reflection(self) -> bool {
        self == AblationMode::WithRetrievalAndReflection
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" => Ok(AblationMode::Base),
            "retrieval" | "with_retrieval" => Ok(AblationMode::WithRetrieval),
            "reflection" | "with_retrieval_and_reflection" => Ok(AblationMode::WithRetrievalAndReflection),
            other => Err(EvalError::Unknown { what: "ablation mode", value: other.to_string() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub extraction: ExtractionSettings,
    pub reflection: ReflectionSettings,
    pub parallelism: usize,
    /// Overrides the dataset's default instruction.
    pub instruction: Option<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            extraction: ExtractionSettings::default(),
            reflection: ReflectionSettings::default(),
            parallelism: 2,
            instruction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrace {
    pub mode: AblationMode,
    pub index: usize,
    pub answer: Option<Value>,
    pub agreement: Option<f64>,
    pub reflected: bool,
    pub cases_used: Vec<String>,
    pub error: Option<String>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: AblationMode,
    pub metrics: Metrics,
    pub failed_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: Dataset,
    pub instances: usize,
    pub rows: Vec<ModeRow>,
    pub trace: Vec<InstanceTrace>,
}

impl AblationReport {
    pub fn row(&self, mode: AblationMode) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Aligned plain-text table, one row per mode.
    pub fn table(&self) -> String {
        let header = ["mode", "precision", "recall", "f1", "tp", "fp", "fn", "failed"];
        let mut rows: Vec<[String; 8]> = vec![header.map(String::from)];
        for r in &self.rows {
            let m = &r.metrics;
            rows.push([
                r.mode.to_string(),
                format!("{:.4}", m.precision),
                format!("{:.4}", m.recall),
                format!("{:.4}", m.f1),
                m.tp.to_string(),
                m.fp.to_string(),
                m.fn_.to_string(),
                r.failed_instances.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..8).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| if c == 0 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

struct RunCtx<'a> {
    gateway: &'a Gateway,
    prompts: &'a PromptSet,
    schema: &'a OutputSchema,
    dataset: Dataset,
    instruction: &'a str,
    config: &'a AblationConfig,
}

fn run_instance(ctx: &RunCtx<'_>, cases: &CaseStore, mode: AblationMode, index: usize, inst: &GoldInstance) -> InstanceTrace {
    let gold = ctx.dataset.gold(inst);
    let query = Query { instruction: ctx.instruction, task_kind: ctx.dataset.task_kind(), text: &inst.text };
    let settings = ExtractionSettings { retrieval: mode.retrieval(), ..ctx.config.extraction };
    let outcome = extract(ctx.gateway, ctx.prompts, cases, &query, ctx.schema, &settings).and_then(|ex| {
        let mut used: Vec<String> = ex.examples_used.iter().map(|s| s.case.case_id.clone()).collect();
        let prelim = ex.consensus;
        if mode.reflection() && route(&prelim) == Route::Reflect {
            let fin = reflect(ctx.gateway, ctx.prompts, cases, &query, ctx.schema, &prelim, &ctx.config.reflection)?;
            used.extend(fin.bad_cases_used.iter().cloned());
            Ok((fin.answer, prelim.agreement, fin.reflected, used))
        } else {
            Ok((prelim.answer, prelim.agreement, false, used))
        }
    });
    match outcome {
        Ok((answer, agreement, reflected, cases_used)) => InstanceTrace {
            mode,
            index,
            metrics: score_set(&ctx.dataset.predicted(&answer), &gold),
            answer: Some(answer),
            agreement: Some(agreement),
            reflected,
            cases_used,
            error: None,
        },
        Err(e) => {
            log::warn!("instance {index} ({mode}) failed: {e}");
            InstanceTrace {
                mode,
                index,
                answer: None,
                agreement: None,
                reflected: false,
                cases_used: Vec::new(),
                error: Some(e.to_string()),
                metrics: score_set(&BTreeSet::new(), &gold),
            }
        }
    }
}

/// Runs every instance under every mode. Each mode starts from its own copy
/// of the engine's case store, and no cases are added during the run. An instance whose
/// model calls fail counts as all misses.
pub fn run_ablation(
    engine: &Engine,
    dataset: Dataset,
    instances: &[GoldInstance],
    modes: &[AblationMode],
    config: &AblationConfig,
) -> Result<AblationReport, EvalError> {
    if modes.is_empty() {
        return Err(EvalError::NoModes);
    }
    let schema_id = dataset.task_kind().default_schema_id().expect("benchmark kinds have default schemas");
    let schema = engine
        .schemas
        .read()
        .unwrap_or_else(|e| e.into_inner())
        .get(schema_id)
        .ok_or_else(|| EvalError::MissingSchema(schema_id.into()))?
        .schema
        .clone();
    let instruction = config.instruction.as_deref().unwrap_or(dataset.default_instruction());
    let ctx = RunCtx { gateway: &engine.gateway, prompts: &engine.prompts, schema: &schema, dataset, instruction, config };

    let mut rows = Vec::new();
    let mut trace = Vec::new();
    for &mode in modes {
        let cases = engine.cases.clone();
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<InstanceTrace>>> = Mutex::new(vec![None; instances.len()]);
        thread::scope(|s| {
            for _ in 0..config.parallelism.clamp(1, instances.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= instances.len() {
                        break;
                    }
                    let t = run_instance(&ctx, &cases, mode, i, &instances[i]);
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(t);
                });
            }
        });
        let mode_trace: Vec<InstanceTrace> = slots
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .into_iter()
            .map(|t| t.expect("every instance ran"))
            .collect();
        rows.push(ModeRow {
            mode,
            metrics: Metrics::micro(mode_trace.iter().map(|t| &t.metrics)),
            failed_instances: mode_trace.iter().filter(|t| t.error.is_some()).count(),
        });
        trace.extend(mode_trace);
    }
    Ok(AblationReport { dataset, instances: instances.len(), rows, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("science.tsv")
    }

    fn set(items: &[(&str, &str)]) -> BTreeSet<(String, String)> {
        items.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn crossner_examples() {
        let got = parse_crossner("John\tB-person\nruns\tO\n\nIt\tO\nrains\tO\n", p()).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].ner_gold, set(&[("person", "John")]));
        assert_eq!(got[0].text, "John runs");
        assert_eq!(got[0].domain_tag, "science");
        assert!(got[1].ner_gold.is_empty());

        let err = parse_crossner("John\tB-\n", p());
        assert!(matches!(err, Err(EvalError::MalformedLine { line: 1, .. })));
        let err = parse_crossner("ok\tO\nno-tab-here\n", p());
        assert!(matches!(err, Err(EvalError::MalformedLine { line: 2, .. })));
    }

    #[test]
    fn crossner_multi_token_and_stray_inside() {
        let got = parse_crossner("New\tB-loc\nYork\tI-loc\nand\tO\nParis\tI-loc\nBob\tB-per\nAlice\tB-per\n", p()).unwrap();
        assert_eq!(got[0].ner_gold, set(&[("loc", "New York"), ("loc", "Paris"), ("per", "Bob"), ("per", "Alice")]));
    }

    #[test]
    fn nyt_examples() {
        let one = parse_nyt11(r#"{"text":"Obama was born in Hawaii.","triples":[{"head":"Obama","relation":"born_in","tail":"Hawaii"},{"head":"Obama","relation":"born_in","tail":"Hawaii"}]}"#, p()).unwrap();
        assert_eq!((one.len(), one[0].re_gold.len()), (1, 1));
        let err = parse_nyt11("{\"text\":\"a\",\"triples\":[]}\n{\"text\":\"x\",\"triples\":[{\"head\":\"a\",\"tail\":\"b\"}]}", p());
        assert!(matches!(err, Err(EvalError::MalformedLine { line: 2, .. })));
    }

    #[test]
    fn scoring_examples() {
        let gold: BTreeSet<_> = [("PER", "Obama"), ("LOC", "Hawaii")].into_iter().collect();
        let pred: BTreeSet<_> = [("PER", "Obama"), ("ORG", "Hawaii")].into_iter().collect();
        let m = score_set(&pred, &gold);
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        assert_eq!(score_set(&gold, &gold).f1, 1.0);
        let m = score_set(&BTreeSet::new(), &gold);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn predictions_are_normalized() {
        let ans = json!({"entities": [{"mention": " Barack  OBAMA", "type": "Person"}, {"mention": 3}]});
        let got = Dataset::CrossNer.predicted(&ans);
        assert_eq!(got, [vec!["person".to_string(), "barack obama".to_string()]].into_iter().collect());
    }

    #[test]
    fn table_is_aligned() {
        let r = AblationReport {
            dataset: Dataset::CrossNer,
            instances: 1,
            rows: vec![ModeRow { mode: AblationMode::Base, metrics: Metrics::from_counts(1, 1, 1), failed_instances: 0 }],
            trace: vec![],
        };
        let t = r.table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("base"));
        assert_eq!(lines[0].len(), lines[1].len());
    }

    fn ablation_gateway() -> Gateway {
        use crate::llm::{LexicalEmbedder, LlmError, ScriptedBackend};
        let b = ScriptedBackend::new(|req| {
            let user = &req.messages.last().unwrap().content;
            if user.contains("Bob") {
                return Err(LlmError::Server { status: 500, body: "down".into() });
            }
            let n = req.params.n_samples as usize;
            Ok(vec![r#"{"entities":[{"mention":"John","type":"person"}]}"#.to_string(); n])
        });
        Gateway::new(std::sync::Arc::new(b), std::sync::Arc::new(LexicalEmbedder::default()), "m")
            .with_retry(crate::llm::RetryPolicy::none())
    }

    #[test]
    fn single_mode_report_with_failure() {
        let instances = parse_crossner("John\tB-person\nruns\tO\n\nBob\tB-person\nsleeps\tO\n", p()).unwrap();
        let engine = Engine::new(
            ablation_gateway(),
            PromptSet::bundled(),
            crate::schema::SchemaRepository::bundled(),
            CaseStore::in_memory(crate::llm::LEXICAL_DIM),
        );
        let report = run_ablation(
            &engine,
            Dataset::CrossNer,
            &instances,
            &[AblationMode::Base],
            &AblationConfig::default(),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 1);
        let m = report.rows[0].metrics;
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
        assert_eq!(report.rows[0].failed_instances, 1);
        assert!(report.trace[1].error.is_some());
        assert_eq!(m, Metrics::micro(report.trace.iter().map(|t| &t.metrics)));
        assert!(matches!(
            run_ablation(&engine, Dataset::CrossNer, &instances, &[], &AblationConfig::default()),
            Err(EvalError::NoModes)
        ));
    }

    fn tagged_sentence() -> impl Strategy<Value = Vec<(String, String)>> {
        proptest::collection::vec(("[A-Za-z]{1,6}", prop_oneof!["O", "B-per", "I-per", "B-loc", "I-loc"]), 1..12)
            .prop_map(|v| v.into_iter().map(|(t, g)| (t, g.to_string())).collect())
    }

    proptest! {
        #[test]
        fn crossner_round_trip(sentences in proptest::collection::vec(tagged_sentence(), 1..5)) {
            let mut text = String::new();
            for s in &sentences {
                for (t, g) in s {
                    text.push_str(&format!("{t}\t{g}\n"));
                }
                text.push('\n');
            }
            let loaded = parse_crossner(&text, p()).unwrap();
            let again = parse_crossner(&write_crossner(&loaded), p()).unwrap();
            prop_assert_eq!(loaded, again);
        }

        #[test]
        fn nyt_round_trip(rows in proptest::collection::vec(proptest::collection::vec(("[a-z ]{1,5}", "[a-z_]{1,4}", "[a-z]{1,5}"), 0..4), 1..4)) {
            let instances: Vec<GoldInstance> = rows.iter().map(|ts| GoldInstance {
                text: ts.iter().map(|(h, _, t)| format!("{h} {t}")).collect::<Vec<_>>().join(". "),
                ner_gold: BTreeSet::new(),
                re_gold: ts.iter().cloned().collect(),
                domain_tag: "science".into(),
                ner_spans: vec![],
            }).collect();
            let loaded = parse_nyt11(&write_nyt11(&instances), p()).unwrap();
            prop_assert_eq!(loaded, instances);
        }

        #[test]
        fn swap_exchanges_precision_and_recall(a in proptest::collection::btree_set(0u8..20, 0..10), b in proptest::collection::btree_set(0u8..20, 0..10)) {
            let ab = score_set(&a, &b);
            let ba = score_set(&b, &a);
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
            prop_assert_eq!(ab.f1, ba.f1);
        }
    }
}
