//! Runs one extraction against a real chat-completions endpoint.
//!
//!     KE_API_KEY=... cargo run --example live_backend -- "instruction" path/to/input
//!
//! `KE_BASE_URL` points the client at another compatible server. Add
//! `--record fixture.jsonl` to keep the exchange for later replays.

use ke::ingest::load_document;
use ke::pipeline::{run_extract, BackendSource, Engine, PipelineConfig};
use ke::schema::TaskKind;
use ke::schema_agent::ExtractionTask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let source = match args.iter().position(|a| a == "--record") {
        Some(i) if i + 1 < args.len() => {
            let path = args.remove(i + 1);
            args.remove(i);
            BackendSource::Record(path.into())
        }
        _ => BackendSource::Live,
    };
    let config = PipelineConfig::default();
    if std::env::var_os(&config.backend.api_key_env).is_none() || args.len() != 2 {
        eprintln!("usage: {}=<key> cargo run --example live_backend -- [--record FILE] INSTRUCTION INPUT", config.backend.api_key_env);
        eprintln!("model {} at {}", config.backend.chat_model, config.backend.base_url);
        return Ok(());
    }

    let engine = Engine::from_config(&config, &source)?;
    let task = ExtractionTask::new(args[0].clone(), TaskKind::Custom, load_document(&args[1], None)?);
    let run = run_extract(&engine, &task, &config, None)?;
    eprintln!("schema {:?} {}, {} ms", run.provenance, run.schema_id.as_deref().unwrap_or("-"), run.elapsed_ms);
    print!("{}", run.answer_json());
    Ok(())
}
