//! Replays the recorded book run. No stored schema fits, so one is deduced
//! from the instruction; the chapter spans three chunks and the uncertain
//! one goes through reflection before the answers are merged.

use ke::ingest::{load_document, ChunkingPolicy, DocumentFormat};
use ke::pipeline::{run_extract, BackendSource, Engine, PipelineConfig};
use ke::schema::{serialize_schema, TaskKind};
use ke::schema_agent::ExtractionTask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/book");
    let config = PipelineConfig::default();
    let engine = Engine::from_config(&config, &BackendSource::Replay(format!("{dir}/replay.jsonl").into()))?;

    let doc = load_document(&format!("{dir}/chapter.txt"), Some(DocumentFormat::PdfText))?;
    let task = ExtractionTask::new("Extract characters and background setting", TaskKind::Custom, doc);
    let run = run_extract(&engine, &task, &config, None)?;

    println!("schema ({:?}): {}", run.provenance, serialize_schema(&run.schema));
    let ChunkingPolicy { chunk_size, overlap, .. } = config.chunking;
    println!("{} chunks of {chunk_size} chars, overlap {overlap}", run.chunks.len());
    for chunk in &run.chunks {
        let r = chunk.result.as_ref().expect("every recorded chunk succeeds");
        println!(
            "  chunk {} [{}..{}]: agreement {:.2}{}",
            chunk.index,
            chunk.span_start,
            chunk.span_end,
            r.preliminary_agreement,
            if r.reflected { ", reflected" } else { "" }
        );
    }
    print!("{}", run.answer_json());
    Ok(())
}
