//! Command-line interface.
//!
//! Exit codes: 0 success, 2 usage error, 3 input error, 4 backend error,
//! 5 extraction failed on every chunk.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::cases::CaseStore;
use crate::eval::{run_ablation, AblationConfig, AblationMode, Dataset, EvalError};
use crate::ingest::{load_document, DocumentFormat};
use crate::llm::{LlmError, LEXICAL_DIM};
use crate::pipeline::{run_extract, trace_jsonl, BackendSource, Engine, PipelineConfig, PipelineError};
use crate::prompts::PromptSet;
use crate::schema::{parse_schema_definition, serialize_record_pretty, SchemaError, SchemaRepository, TaskKind};
use crate::schema_agent::{ExtractionTask, SchemaAgentError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;
pub const EXIT_ALL_CHUNKS_FAILED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "ke", version, about = "Schema-guided knowledge extraction with case retrieval and reflection")]
struct Cli {
    /// Configuration file (default: ./ke.config.json when present).
    #[arg(long, global = true, help_heading = "Global options")]
    config: Option<PathBuf>,
    /// Answer model calls from a replay fixture instead of the network.
    #[arg(long, global = true, help_heading = "Global options", conflicts_with = "record_fixture")]
    llm_fixture: Option<PathBuf>,
    /// Call the live backend and append every exchange to this fixture.
    #[arg(long, global = true, help_heading = "Global options")]
    record_fixture: Option<PathBuf>,
    /// Schema repository directory.
    #[arg(long, global = true, help_heading = "Global options")]
    schemas: Option<PathBuf>,
    /// Case repository directory.
    #[arg(long, global = true, help_heading = "Global options")]
    cases: Option<PathBuf>,
    /// Directory with prompt templates overriding the bundled ones.
    #[arg(long, global = true, help_heading = "Global options")]
    prompts: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract structured knowledge from a document.
    Extract(ExtractArgs),
    /// Score ablation modes on a benchmark file.
    Eval(EvalArgs),
    /// Inspect or extend the schema repository.
    #[command(subcommand)]
    Schema(SchemaCmd),
    /// Inspect or export the case repository.
    #[command(subcommand)]
    Cases(CasesCmd),
    /// Work with prompt templates.
    #[command(subcommand)]
    Prompts(PromptsCmd),
    /// Print the effective configuration as JSON.
    Config,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Instruction, e.g. "Extract characters and background setting".
    #[arg(long)]
    task: String,
    /// Local path or http(s) URL.
    #[arg(long)]
    input: String,
    /// NER, RE, EE, Triple or Custom.
    #[arg(long, default_value = "Custom")]
    kind: TaskKind,
    #[arg(long)]
    schema_id: Option<String>,
    /// text, html or pdf-text.
    #[arg(long)]
    format: Option<DocumentFormat>,
    /// Answer file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace file, one JSON event per line.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Add cases to the repository after the run.
    #[arg(long)]
    update_cases: bool,
    /// Reference answer (JSON) used when updating cases.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Identify the document genre first and use it for schema matching.
    #[arg(long)]
    classify: bool,
    /// Save a deduced schema into the schema repository.
    #[arg(long)]
    save_deduced: bool,
    /// Reject answers with keys outside the schema.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    samples: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    few_shot_k: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// crossner or nyt11.
    #[arg(long)]
    dataset: Dataset,
    #[arg(long)]
    path: PathBuf,
    /// Comma-separated: base, retrieval, reflection.
    #[arg(long, value_delimiter = ',', default_value = "base,retrieval,reflection")]
    modes: Vec<AblationMode>,
    /// JSON report file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Overrides the dataset's default instruction.
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long)]
    samples: Option<u32>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum SchemaCmd {
    /// List schema ids with their task kind and tags.
    List,
    /// Validate a definition file and add it to the repository directory.
    Add { file: PathBuf },
    /// Print a schema definition.
    Show { id: String },
}

#[derive(Debug, Subcommand)]
enum CasesCmd {
    /// Case counts per kind and task kind.
    Stats,
    /// Write all cases as JSON lines.
    Export { file: PathBuf },
}

#[derive(Debug, Subcommand)]
enum PromptsCmd {
    /// Write the bundled templates into a directory for editing.
    Export { dir: PathBuf },
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    fn input(message: impl Into<String>) -> Self {
        Failure { code: EXIT_INPUT, message: message.into() }
    }
}

fn llm_code(e: &LlmError) -> i32 {
    match e {
        LlmError::Fixture(_) => EXIT_INPUT,
        _ => EXIT_BACKEND,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) => EXIT_USAGE,
            PipelineError::Llm(l) => llm_code(l),
            PipelineError::SchemaAgent(SchemaAgentError::Llm(l)) => llm_code(l),
            PipelineError::SchemaAgent(SchemaAgentError::DeductionParseFailure { .. }) => EXIT_BACKEND,
            PipelineError::AllChunksFailed { .. } => EXIT_ALL_CHUNKS_FAILED,
            _ => EXIT_INPUT,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = if matches!(e, EvalError::NoModes | EvalError::Unknown { .. }) { EXIT_USAGE } else { EXIT_INPUT };
        Failure { code, message: e.to_string() }
    }
}

impl From<SchemaError> for Failure {
    fn from(e: SchemaError) -> Self {
        Failure::input(e.to_string())
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if Path::new(PipelineConfig::FILE_NAME).is_file() => PipelineConfig::load(Path::new(PipelineConfig::FILE_NAME))?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &cli.schemas {
        config.schemas_dir = Some(d.clone());
    }
    if let Some(d) = &cli.cases {
        config.cases_dir = Some(d.clone());
    }
    if let Some(d) = &cli.prompts {
        config.prompts_dir = Some(d.clone());
    }
    Ok(config)
}

fn backend_source(cli: &Cli) -> BackendSource {
    match (&cli.llm_fixture, &cli.record_fixture) {
        (Some(p), _) => BackendSource::Replay(p.clone()),
        (None, Some(p)) => BackendSource::Record(p.clone()),
        (None, None) => BackendSource::Live,
    }
}

fn write_output(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::input(format!("{}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(|e| Failure::input(e.to_string())),
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let mut config = load_config(&cli)?;
    let source = backend_source(&cli);
    match cli.command {
        Command::Extract(args) => extract_cmd(args, config, &source, out, err),
        Command::Eval(args) => {
            if let Some(n) = args.samples {
                config.extraction.samples = n;
            }
            if let Some(t) = args.threshold {
                config.extraction.threshold = t;
            }
            if let Some(p) = args.parallelism {
                config.parallelism = p;
            }
            config.validate()?;
            let engine = Engine::from_config(&config, &source)?;
            let instances = args.dataset.load(&args.path)?;
            let ablation = AblationConfig {
                extraction: config.extraction,
                reflection: config.reflection,
                parallelism: config.parallelism,
                instruction: args.instruction,
            };
            let report = run_ablation(&engine, args.dataset, &instances, &args.modes, &ablation)?;
            if let Some(p) = &args.report {
                fs::write(p, report.to_json() + "\n").map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            }
            write_output(None, &report.table(), out)
        }
        Command::Schema(cmd) => schema_cmd(cmd, &config, out),
        Command::Cases(cmd) => {
            let dim = if config.embedder.is_remote(&source) { config.backend.embed_dim } else { LEXICAL_DIM };
            let store = match &config.cases_dir {
                Some(dir) => CaseStore::open(dir, dim).map_err(|e| Failure::input(e.to_string()))?,
                None => CaseStore::in_memory(dim),
            };
            match cmd {
                CasesCmd::Stats => {
                    let text = serde_json::to_string_pretty(&store.stats()).expect("stats serialize") + "\n";
                    write_output(None, &text, out)
                }
                CasesCmd::Export { file } => {
                    let n = store.export(&file).map_err(|e| Failure::input(e.to_string()))?;
                    let _ = writeln!(err, "exported {n} cases to {}", file.display());
                    Ok(())
                }
            }
        }
        Command::Prompts(PromptsCmd::Export { dir }) => {
            PromptSet::write_bundled(&dir).map_err(|e| Failure::input(e.to_string()))?;
            let _ = writeln!(err, "wrote templates to {}", dir.display());
            Ok(())
        }
        Command::Config => write_output(None, &(config.to_json() + "\n"), out),
    }
}

fn extract_cmd(
    args: ExtractArgs,
    mut config: PipelineConfig,
    source: &BackendSource,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), Failure> {
    if let Some(n) = args.samples {
        config.extraction.samples = n;
    }
    if let Some(t) = args.temperature {
        config.extraction.temperature = t;
    }
    if let Some(t) = args.threshold {
        config.extraction.threshold = t;
    }
    if let Some(k) = args.few_shot_k {
        config.extraction.few_shot_k = k;
    }
    if let Some(n) = args.chunk_size {
        config.chunking.chunk_size = n;
    }
    if let Some(n) = args.overlap {
        config.chunking.overlap = n;
    }
    if let Some(n) = args.parallelism {
        config.parallelism = n;
    }
    config.strict_merge |= args.strict;
    config.update_cases |= args.update_cases;
    config.classify |= args.classify;
    config.save_deduced |= args.save_deduced;
    config.validate()?;
    if args.gold.is_some() && !config.update_cases {
        return Err(Failure::usage("--gold only takes effect together with --update-cases"));
    }

    let gold: Option<Value> = match &args.gold {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let document = load_document(&args.input, args.format).map_err(|e| Failure::input(e.to_string()))?;
    let engine = Engine::from_config(&config, source)?;
    let mut task = ExtractionTask::new(args.task, args.kind, document);
    task.schema_id = args.schema_id;

    match run_extract(&engine, &task, &config, gold.as_ref()) {
        Ok(run) => {
            if let Some(p) = &args.trace {
                fs::write(p, run.trace_jsonl()).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            }
            write_output(args.out.as_deref(), &run.answer_json(), out)?;
            let failed = run.chunks.iter().filter(|c| c.error.is_some()).count();
            let _ = writeln!(
                err,
                "schema: {} ({:?}); chunks: {} ok, {failed} failed",
                run.schema_id.as_deref().unwrap_or(&run.schema.title),
                run.provenance,
                run.chunks.len() - failed,
            );
            if config.update_cases {
                let stats = engine.cases.stats();
                let _ = writeln!(err, "case repository: {} correct, {} bad", stats.correct, stats.bad);
            }
            Ok(())
        }
        Err(PipelineError::AllChunksFailed { chunks, trace }) => {
            if let Some(p) = &args.trace {
                let _ = fs::write(p, trace_jsonl(&trace));
            }
            Err(PipelineError::AllChunksFailed { chunks, trace: Vec::new() }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn schema_cmd(cmd: SchemaCmd, config: &PipelineConfig, out: &mut dyn Write) -> Result<(), Failure> {
    let repository = match &config.schemas_dir {
        Some(dir) if dir.is_dir() => SchemaRepository::load_dir(dir)?,
        _ => SchemaRepository::bundled(),
    };
    match cmd {
        SchemaCmd::List => {
            let mut text = String::new();
            for r in repository.records() {
                text.push_str(&format!("{}\t{}\t{}\n", r.id, r.task_kind, r.scenario_tags.join(",")));
            }
            write_output(None, &text, out)
        }
        SchemaCmd::Show { id } => {
            let r = repository.get(&id).ok_or_else(|| Failure::input(format!("no schema with id {id:?}")))?;
            write_output(None, &(serialize_record_pretty(r) + "\n"), out)
        }
        SchemaCmd::Add { file } => {
            let dir = config
                .schemas_dir
                .as_ref()
                .ok_or_else(|| Failure::usage("no schema directory configured; pass --schemas DIR"))?;
            let text = fs::read_to_string(&file).map_err(|e| Failure::input(format!("{}: {e}", file.display())))?;
            let record = parse_schema_definition(&text)?;
            if !dir.is_dir() {
                SchemaRepository::seed_dir(dir)?;
            }
            let mut repository = SchemaRepository::load_dir(dir)?;
            let id = record.id.clone();
            let body = serialize_record_pretty(&record);
            repository.insert(record)?;
            let path = dir.join(format!("{id}.json"));
            fs::write(&path, body + "\n").map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            write_output(None, &format!("added {id}\n"), out)
        }
    }
}
