//! Shows how the case store grows. The first run has no examples and gets
//! one entity wrong; curation against the reference answer stores a
//! correct case and a bad case, and the second run sees the correct one
//! as a few-shot example. The model here is a local stand-in.

use std::sync::Arc;

use ke::cases::CaseStore;
use ke::ingest::SourceDocument;
use ke::llm::{Gateway, LexicalEmbedder, ScriptedBackend, LEXICAL_DIM};
use ke::pipeline::{run_extract, Engine, PipelineConfig};
use ke::prompts::PromptSet;
use ke::schema::{SchemaRepository, TaskKind};
use ke::schema_agent::ExtractionTask;
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backend = ScriptedBackend::new(|req| {
        let system = &req.messages[0].content;
        let reply = if system.starts_with("You explain how a correct") {
            "Step 1: Grace Hopper is a person.\nStep 2: Arlington is a place.\nAnswer: both entities.".to_string()
        } else if system.starts_with("You analyse mistakes") {
            "Place names such as Arlington were missed; tag them as location.".to_string()
        } else if req.messages.len() > 2 {
            // a few-shot example is in the prompt
            json!({"entities": [{"mention": "Grace Hopper", "type": "person"}, {"mention": "Arlington", "type": "location"}]}).to_string()
        } else {
            json!({"entities": [{"mention": "Grace Hopper", "type": "person"}]}).to_string()
        };
        Ok(vec![reply; req.params.n_samples as usize])
    });
    let gateway = Gateway::new(Arc::new(backend), Arc::new(LexicalEmbedder::default()), "stand-in");
    let cases_dir = scratch_dir();
    let cases = CaseStore::open(&cases_dir, LEXICAL_DIM)?;
    let engine = Engine::new(gateway, PromptSet::bundled(), SchemaRepository::bundled(), cases);

    let doc = SourceDocument::from_text("hopper.txt", "Grace Hopper is buried in Arlington.");
    let task = ExtractionTask::new("Extract all named entities", TaskKind::Ner, doc);
    let gold = json!({"entities": [{"mention": "Grace Hopper", "type": "person"}, {"mention": "Arlington", "type": "location"}]});
    let config = PipelineConfig { update_cases: true, ..PipelineConfig::default() };

    for round in 1..=2 {
        let run = run_extract(&engine, &task, &config, Some(&gold))?;
        let stats = engine.cases.stats();
        println!("run {round}: {}", serde_json::to_string(&run.merged_answer)?);
        println!("  store: {} correct, {} bad", stats.correct, stats.bad);
    }
    println!("cases persisted under {}", cases_dir.display());
    Ok(())
}

fn scratch_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("ke-case-loop-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}
