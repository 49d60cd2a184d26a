//! Replays the recorded news run: the task matches the bundled news schema,
//! so no schema has to be deduced, and three samples are voted per chunk.

use ke::ingest::load_document;
use ke::pipeline::{run_extract, BackendSource, Engine, PipelineConfig};
use ke::schema::TaskKind;
use ke::schema_agent::ExtractionTask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/news");
    let config = PipelineConfig::default();
    let engine = Engine::from_config(&config, &BackendSource::Replay(format!("{dir}/replay.jsonl").into()))?;

    let doc = load_document(&format!("{dir}/article.html"), None)?;
    let task = ExtractionTask::new("Extract key information from news articles", TaskKind::Custom, doc);
    let run = run_extract(&engine, &task, &config, None)?;

    println!("schema: {} ({:?})", run.schema_id.as_deref().unwrap_or("-"), run.provenance);
    for chunk in &run.chunks {
        if let Some(result) = &chunk.result {
            println!("chunk {}: agreement {:.2}, reflected {}", chunk.index, result.preliminary_agreement, result.reflected);
        }
    }
    print!("{}", run.answer_json());
    Ok(())
}
