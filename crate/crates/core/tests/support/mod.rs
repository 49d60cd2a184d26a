//! Fixture authoring. The replay files under `fixtures/` are produced by
//! running the real pipeline against scripted backends wrapped in a
//! recorder; `KE_BLESS=1 cargo test --test fixtures` rewrites them.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ke::cases::{CaseKind, CaseStore, NewCase, Provenance};
use ke::eval::{run_ablation, AblationConfig, AblationMode, Dataset, GoldInstance};
use ke::ingest::{load_document, DocumentFormat};
use ke::json::canonical_json;
use ke::llm::{ChatBackend, ChatRequest, Embedder, Gateway, LexicalEmbedder, LlmError, RecordingBackend, ScriptedBackend, LEXICAL_DIM};
use ke::pipeline::{run_extract, Engine, PipelineConfig};
use ke::prompts::PromptSet;
use ke::schema::{SchemaRepository, TaskKind};
use ke::schema_agent::ExtractionTask;
use serde_json::{json, Value};

pub const NEWS_TASK: &str = "Extract key information from news articles";
pub const NEWS_INPUT: &str = "fixtures/news/article.html";
pub const BOOK_TASK: &str = "Extract characters and background setting";
pub const BOOK_INPUT: &str = "fixtures/book/chapter.txt";
pub const ABLATION_SET: &str = "fixtures/ablation/science.tsv";
pub const ABLATION_CASES: &str = "fixtures/ablation/cases";
pub const SEED_TIMESTAMP: &str = "2024-01-01T00:00:00.000Z";

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(rel: &str) -> PathBuf {
    crate_dir().join("fixtures").join(rel)
}

// ---------------------------------------------------------------- requests

pub fn system_text(req: &ChatRequest) -> &str {
    req.messages.first().map(|m| m.content.as_str()).unwrap_or("")
}

pub fn last_user(req: &ChatRequest) -> &str {
    req.messages.last().map(|m| m.content.as_str()).unwrap_or("")
}

/// The `Text:` section of the final user message.
pub fn query_text(req: &ChatRequest) -> &str {
    let msg = last_user(req);
    let start = msg.rfind("\nText:\n").map(|i| i + "\nText:\n".len()).unwrap_or(0);
    let rest = &msg[start..];
    rest.split("\n\nDraft answer").next().unwrap_or(rest).trim_end()
}

pub fn is_extraction(req: &ChatRequest) -> bool {
    system_text(req).starts_with("You are a knowledge extraction assistant")
}

pub fn is_reflection(req: &ChatRequest) -> bool {
    system_text(req).starts_with("You are a careful reviewer")
}

pub fn is_deduction(req: &ChatRequest) -> bool {
    system_text(req).starts_with("You design output schemas")
}

pub fn is_genre(req: &ChatRequest) -> bool {
    system_text(req).starts_with("You classify documents")
}

pub fn is_curator_reasoning(req: &ChatRequest) -> bool {
    system_text(req).starts_with("You explain how a correct")
}

pub fn is_curator_reflection(req: &ChatRequest) -> bool {
    system_text(req).starts_with("You analyse mistakes")
}

fn n(req: &ChatRequest) -> usize {
    req.params.n_samples as usize
}

fn unexpected(req: &ChatRequest) -> LlmError {
    LlmError::BadRequest { status: 400, body: format!("scripted backend has no reply for: {}", system_text(req).lines().next().unwrap_or("")) }
}

// -------------------------------------------------------------------- news

pub fn news_answer(with_date: bool) -> Value {
    json!({
        "news_type": "Politics news report",
        "title": "Coastal Cities Sign Joint Flood Defense Pact",
        "summary": "Port Calder, Westmouth and Eastfold agreed to pool 240 million euros for a shared flood defense network; the regional government will match the funds if construction starts before the end of 2025.",
        "publication_date": if with_date { "12 March 2024" } else { "" },
        "key_events": [
            {"name": "Signing of the flood defense pact", "date": "Tuesday", "description": "Three harbor cities agreed to share the cost of sea walls and set up a joint board to prioritize barriers."},
            {"name": "Regional matching offer", "date": "", "description": "The Calder Regional Government will match the cities' contribution if construction starts before the end of 2025."}
        ],
        "key_people": [
            {"name": "Lena Ortiz", "role": "Mayor of Port Calder"},
            {"name": "Henrik Dahl", "role": "Mayor of Westmouth"},
            {"name": "Aiyana Brooks", "role": "Mayor of Eastfold"},
            {"name": "Samuel Achebe", "role": "Regional minister for infrastructure"}
        ],
        "organizations": ["Calder Regional Government", "Coastal Resilience Agency"],
        "locations": ["Port Calder", "Westmouth", "Eastfold", "Calder coast"]
    })
}

/// Two of three samples agree (one wrapped in a code fence), the third
/// misses the date: agreement 2/3, accepted without reflection.
pub fn news_backend() -> ScriptedBackend {
    ScriptedBackend::new(|req| {
        if is_extraction(req) {
            let full = news_answer(true);
            let texts = [
                format!("```json\n{}\n```", serde_json::to_string_pretty(&full).unwrap()),
                full.to_string(),
                news_answer(false).to_string(),
            ];
            return Ok(texts.iter().cycle().take(n(req)).cloned().collect());
        }
        Err(unexpected(req))
    })
}

// -------------------------------------------------------------------- book

pub const BOOK_CHARACTERS: [(&str, &str); 4] = [
    ("Mara Quill", "Seventeen-year-old orphan who copies her uncle's charts and notices the flaw in the wrecked ship's route"),
    ("Tobias Fen", "Mara's uncle, the quiet lighthouse keeper of Gannet Point and owner of the chandlery"),
    ("Ilse Varga", "Cargo insurance agent from the capital investigating the wreck of the brig Corrigan"),
    ("Doran Hale", "Captain of the Corrigan, who was paid to run the ship aground with a false lantern"),
];

pub const BOOK_SETTING: &str =
    "Saltmarsh Reach, a small coastal town between a marsh and the sea, with a lighthouse on Gannet Point, in the winter of 1887";

pub fn book_schema_reply() -> String {
    let schema = json!({
        "title": "Story Elements",
        "fields": [
            {
                "name": "main_characters",
                "kind": "record_list",
                "description": "Main characters of the story.",
                "children": [
                    {"name": "name", "kind": "text", "description": "Character name."},
                    {"name": "description", "kind": "text", "description": "Who the character is and their role in the story."}
                ]
            },
            {"name": "background_setting", "kind": "text", "description": "Where and when the story takes place."}
        ]
    });
    format!("Here is the schema:\n```json\n{}\n```", serde_json::to_string_pretty(&schema).unwrap())
}

/// The answer a careful reader would give for one chunk.
pub fn book_answer(text: &str) -> Value {
    let characters: Vec<Value> = BOOK_CHARACTERS
        .iter()
        .filter(|(name, _)| text.contains(name))
        .map(|(name, description)| json!({"name": name, "description": description}))
        .collect();
    let setting = if text.contains("winter of 1887") { BOOK_SETTING } else { "" };
    json!({"main_characters": characters, "background_setting": setting})
}

/// Chunks containing the page where Mara spots the route problem get three
/// different samples, which sends them through reflection.
pub fn book_backend() -> ScriptedBackend {
    ScriptedBackend::new(|req| {
        if is_deduction(req) {
            return Ok(vec![book_schema_reply(); n(req)]);
        }
        if is_reflection(req) {
            return Ok(vec![book_answer(query_text(req)).to_string(); n(req)]);
        }
        if is_extraction(req) {
            let text = query_text(req);
            let good = book_answer(text);
            if !text.contains("It was Mara who noticed") {
                return Ok(vec![good.to_string(); n(req)]);
            }
            let mut missing = good.clone();
            missing["main_characters"].as_array_mut().unwrap().pop();
            let mut confused = good.clone();
            confused["main_characters"][0]["description"] = json!("Captain of the lighthouse");
            let texts = [good.to_string(), missing.to_string(), confused.to_string()];
            return Ok(texts.iter().cycle().take(n(req)).cloned().collect());
        }
        Err(unexpected(req))
    })
}

// ---------------------------------------------------------------- ablation

fn ner_answer(entities: &[(String, String)]) -> Value {
    let items: Vec<Value> = entities.iter().map(|(t, m)| json!({"mention": m, "type": t})).collect();
    json!({ "entities": items })
}

/// Instances 0-5 are easy. 6-7 lose an entity without few-shot examples.
/// 8-9 come back empty without examples and split three ways with them,
/// where the empty answer wins the tie; reflection repairs them.
pub fn ablation_backend(instances: &[GoldInstance]) -> ScriptedBackend {
    let by_text: HashMap<String, (usize, Vec<(String, String)>)> = instances
        .iter()
        .enumerate()
        .map(|(i, g)| (g.text.clone(), (i, g.ner_gold.iter().cloned().collect())))
        .collect();
    ScriptedBackend::new(move |req| {
        let text = query_text(req);
        let Some((index, gold)) = by_text.get(text) else {
            return Err(unexpected(req));
        };
        let correct = ner_answer(gold).to_string();
        if is_reflection(req) {
            return Ok(vec![correct; n(req)]);
        }
        if !is_extraction(req) {
            return Err(unexpected(req));
        }
        let with_examples = req.messages.len() > 2;
        let texts: Vec<String> = match (*index, with_examples) {
            (0..=5, _) | (6..=7, true) => vec![correct.clone(); 3],
            (6..=7, false) => vec![ner_answer(&gold[..gold.len() - 1]).to_string(); 3],
            (_, false) => vec![ner_answer(&[]).to_string(); 3],
            (_, true) => vec![ner_answer(&[]).to_string(), correct.clone(), ner_answer(&gold[..1]).to_string()],
        };
        Ok(texts.into_iter().cycle().take(n(req)).collect())
    })
}

pub struct Seed {
    pub kind: CaseKind,
    pub input: &'static str,
    pub answer: Value,
    pub annotation: &'static str,
}

pub fn ablation_seeds() -> Vec<Seed> {
    vec![
        Seed {
            kind: CaseKind::Correct,
            input: "Marie Curie taught at the University of Paris .",
            answer: json!({"entities": [
                {"mention": "Marie Curie", "type": "person"},
                {"mention": "University of Paris", "type": "organisation"}
            ]}),
            annotation: "Step 1: \"Marie Curie\" is a person's full name.\nStep 2: \"University of Paris\" names an institution, so it is an organisation; include the full name.\nAnswer: Marie Curie (person), University of Paris (organisation)",
        },
        Seed {
            kind: CaseKind::Correct,
            input: "Gregor Mendel won no Royal Medal while living in Brno .",
            answer: json!({"entities": [
                {"mention": "Gregor Mendel", "type": "person"},
                {"mention": "Royal Medal", "type": "award"},
                {"mention": "Brno", "type": "location"}
            ]}),
            annotation: "Step 1: \"Gregor Mendel\" is a person.\nStep 2: \"Royal Medal\" is an award; awards count as entities even when mentioned in passing.\nStep 3: \"Brno\" is a city, a location.\nAnswer: Gregor Mendel (person), Royal Medal (award), Brno (location)",
        },
        Seed {
            kind: CaseKind::Bad,
            input: "Ada Lovelace wrote notes for Charles Babbage in London .",
            answer: json!({"entities": []}),
            annotation: "The answer listed no entities although the sentence names two people and a city. Every capitalized name must be checked; an empty list is almost never right for a sentence about scientists.",
        },
    ]
}

pub fn ner_schema_json() -> String {
    let repo = SchemaRepository::bundled();
    ke::schema::serialize_schema(&repo.get("default_ner").unwrap().schema)
}

pub fn write_seed_cases(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let store = CaseStore::open(dir, LEXICAL_DIM).unwrap();
    let embedder = LexicalEmbedder::default();
    for seed in ablation_seeds() {
        let new = NewCase {
            kind: seed.kind,
            task_kind: TaskKind::Ner,
            task_description: Dataset::CrossNer.default_instruction().to_string(),
            input: seed.input.to_string(),
            schema_json: ner_schema_json(),
            answer_json: canonical_json(&seed.answer),
            annotation: seed.annotation.to_string(),
            provenance: Provenance::Verified,
        };
        let embedding = embedder.embed(&new.match_text()).unwrap();
        let mut record = new.into_record(embedding);
        record.created_at = SEED_TIMESTAMP.to_string();
        store.add_case(record).unwrap();
    }
}

// --------------------------------------------------------------- authoring

fn recording_engine(fixture: &Path, inner: ScriptedBackend, cases: CaseStore) -> Engine {
    let backend: Arc<dyn ChatBackend> = Arc::new(RecordingBackend::open(fixture, Arc::new(inner)).unwrap());
    let model = PipelineConfig::default().backend.chat_model;
    let gateway = Gateway::new(backend, Arc::new(LexicalEmbedder::default()), model);
    Engine::new(gateway, PromptSet::bundled(), SchemaRepository::bundled(), cases)
}

/// Rewrites a freshly recorded fixture with its lines sorted, so that the
/// file does not depend on thread scheduling.
fn sort_lines(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    lines.sort_unstable();
    lines.dedup();
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn record_extract(out: &Path, backend: ScriptedBackend, instruction: &str, input: &str, format: Option<DocumentFormat>) {
    let _ = fs::remove_file(out);
    let engine = recording_engine(out, backend, CaseStore::in_memory(LEXICAL_DIM));
    let document = load_document(crate_dir().join(input).to_str().unwrap(), format).unwrap();
    let task = ExtractionTask::new(instruction, TaskKind::Custom, document);
    run_extract(&engine, &task, &PipelineConfig::default(), None).unwrap();
    sort_lines(out);
}

pub fn mask_trace(trace: &str) -> String {
    trace
        .lines()
        .map(|line| {
            let mut v: Value = serde_json::from_str(line).unwrap();
            v["ts_ms"] = json!(0);
            canonical_json(&v) + "\n"
        })
        .collect()
}

/// Runs `ke extract` in replay mode and returns (answer, masked trace).
pub fn cli_extract(replay: &Path, instruction: &str, input: &str, extra: &[&str]) -> (String, String) {
    let tmp = tempfile::tempdir().unwrap();
    let answer = tmp.path().join("answer.json");
    let trace = tmp.path().join("trace.jsonl");
    let mut args: Vec<String> = vec![
        "ke".into(),
        "--llm-fixture".into(),
        replay.display().to_string(),
        "extract".into(),
        "--task".into(),
        instruction.into(),
        "--input".into(),
        input.into(),
        "--out".into(),
        answer.display().to_string(),
        "--trace".into(),
        trace.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = ke::cli::run(args, &mut out, &mut err);
    assert_eq!(code, 0, "ke extract failed: {}", String::from_utf8_lossy(&err));
    (fs::read_to_string(answer).unwrap(), mask_trace(&fs::read_to_string(trace).unwrap()))
}

pub fn load_ablation_set() -> Vec<GoldInstance> {
    Dataset::CrossNer.load(&crate_dir().join(ABLATION_SET)).unwrap()
}

pub fn ablation_config() -> AblationConfig {
    let config = PipelineConfig::default();
    AblationConfig { extraction: config.extraction, reflection: config.reflection, parallelism: 4, instruction: None }
}

/// Writes every generated fixture below `root`, mirroring `fixtures/`.
pub fn author_all(root: &Path) {
    // relative inputs keep source ids in traces identical across machines
    std::env::set_current_dir(crate_dir()).unwrap();
    for sub in ["news", "book", "ablation"] {
        fs::create_dir_all(root.join(sub)).unwrap();
    }

    let news = root.join("news/replay.jsonl");
    record_extract(&news, news_backend(), NEWS_TASK, NEWS_INPUT, None);
    let (answer, trace) = cli_extract(&news, NEWS_TASK, NEWS_INPUT, &[]);
    fs::write(root.join("news/expected_answer.json"), answer).unwrap();
    fs::write(root.join("news/expected_trace.jsonl"), trace).unwrap();

    let book = root.join("book/replay.jsonl");
    record_extract(&book, book_backend(), BOOK_TASK, BOOK_INPUT, Some(DocumentFormat::PdfText));
    let (answer, trace) = cli_extract(&book, BOOK_TASK, BOOK_INPUT, &["--format", "pdf-text"]);
    fs::write(root.join("book/expected_answer.json"), answer).unwrap();
    fs::write(root.join("book/expected_trace.jsonl"), trace).unwrap();

    let cases_dir = root.join("ablation/cases");
    let _ = fs::remove_dir_all(&cases_dir);
    write_seed_cases(&cases_dir);
    let replay = root.join("ablation/replay.jsonl");
    let _ = fs::remove_file(&replay);
    let instances = load_ablation_set();
    let engine = recording_engine(&replay, ablation_backend(&instances), CaseStore::open(&cases_dir, LEXICAL_DIM).unwrap());
    run_ablation(&engine, Dataset::CrossNer, &instances, &AblationMode::ALL, &ablation_config()).unwrap();
    sort_lines(&replay);
}

/// Every file `author_all` produces, relative to the fixture root.
pub const GENERATED: [&str; 9] = [
    "news/replay.jsonl",
    "news/expected_answer.json",
    "news/expected_trace.jsonl",
    "book/replay.jsonl",
    "book/expected_answer.json",
    "book/expected_trace.jsonl",
    "ablation/replay.jsonl",
    "ablation/cases/correct.jsonl",
    "ablation/cases/bad.jsonl",
];
