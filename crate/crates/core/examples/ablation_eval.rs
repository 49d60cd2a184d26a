//! Replays the recorded ablation over a ten-sentence NER sample: zero-shot,
//! with retrieved examples, and with examples plus reflection.
//!
//!     cargo run --example ablation_eval [report.json]

use ke::eval::{run_ablation, AblationConfig, AblationMode, Dataset};
use ke::pipeline::{BackendSource, Engine, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/ablation");
    let config = PipelineConfig { cases_dir: Some(format!("{dir}/cases").into()), ..PipelineConfig::default() };
    let engine = Engine::from_config(&config, &BackendSource::Replay(format!("{dir}/replay.jsonl").into()))?;

    let instances = Dataset::CrossNer.load(format!("{dir}/science.tsv").as_ref())?;
    let ablation = AblationConfig {
        extraction: config.extraction,
        reflection: config.reflection,
        parallelism: 4,
        instruction: None,
    };
    let modes = [AblationMode::Base, AblationMode::WithRetrieval, AblationMode::WithRetrievalAndReflection];
    let report = run_ablation(&engine, Dataset::CrossNer, &instances, &modes, &ablation)?;
    print!("{}", report.table());

    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, report.to_json())?;
        println!("report written to {path}");
    }
    Ok(())
}
