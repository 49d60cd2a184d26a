pub mod ingest;
pub mod json;
pub mod schema;
pub mod llm;
pub mod prompts;
pub mod cases;
pub mod extraction;
pub mod reflection;
pub mod curator;
pub mod schema_agent;
pub mod eval;
pub mod pipeline;
pub mod cli;
