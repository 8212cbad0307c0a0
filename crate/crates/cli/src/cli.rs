//! Command-line parsing and dispatch.

use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dialogic_core::codebook::{builtin_cdas, Codebook};
use dialogic_core::coder::SessionPolicy;
use dialogic_core::evaluation::{render_csv, render_json, render_text, MatchMode};
use dialogic_core::experiment::{builtin_experiment, run_experiment, ExperimentDefinition, CREDENTIAL_ENV_DEFAULT};
use dialogic_core::prompt::presets::{cdas_config, cdas_config_with_anchors};
use dialogic_core::prompt::{compile_instructions, InstructionConfig};
use dialogic_core::store::Store;
use dialogic_core::transcript::{parse_gold, parse_transcript, GoldAnnotationSet, Lesson, DEFAULT_BATCH_SIZE};

use crate::api::{self, AppState};
use crate::chat::ChatConfig;
use crate::ops::{self, OpError};

#[derive(Debug, Parser)]
#[command(name = "dialogic", version, about = "Codebook-driven LLM coding of classroom dialogue")]
pub struct Cli {
    /// Data directory holding configs, lessons and runs.
    #[arg(long, global = true, env = "DIALOGIC_DATA", default_value = "dialogic-data")]
    pub data: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile an instruction config into the document sent to the coder.
    Compile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a built-in instruction config as JSON.
    Preset {
        #[arg(value_enum, default_value_t = PresetName::Cdas)]
        name: PresetName,
    },
    /// Add a lesson transcript (and optional gold labels) to the data directory.
    Import {
        #[arg(long)]
        lesson: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Config whose codebook validates the gold labels (default: built-in CDAS).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Code a lesson and record the run.
    Code(CodeArgs),
    /// Score a run against gold labels.
    Eval {
        #[arg(long)]
        run: String,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Run an example-size experiment.
    Experiment {
        #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
        def: Option<PathBuf>,
        /// Use the built-in four-condition definition.
        #[arg(long)]
        builtin: bool,
        /// Print the definition instead of running it.
        #[arg(long)]
        print_def: bool,
    },
    /// Record a human correction for one turn of a run.
    Adjudicate {
        #[arg(long)]
        run: String,
        #[arg(long)]
        turn: u32,
        /// Comma-separated code labels.
        #[arg(long, value_delimiter = ',')]
        codes: Vec<String>,
        #[arg(long, default_value = "")]
        note: String,
    },
    /// Compile a run's pending adjudications into a new config.
    Feedback {
        #[arg(long)]
        run: String,
        /// Accept adjudications on turns where gold and prediction agree.
        #[arg(long)]
        allow_agreements: bool,
    },
    /// Serve the review API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[command(flatten)]
        chat: ChatArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetName {
    Cdas,
    CdasAnchors,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Exact,
    Overlap,
}

impl From<ModeArg> for MatchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => MatchMode::Exact,
            ModeArg::Overlap => MatchMode::Overlap,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// Chat-completions URL for the chat-http backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the backend credential.
    #[arg(long, default_value = CREDENTIAL_ENV_DEFAULT)]
    pub credential_env: String,
}

impl ChatArgs {
    fn config(&self) -> Option<ChatConfig> {
        Some(ChatConfig {
            endpoint: self.endpoint.clone()?,
            model: self.model.clone().unwrap_or_default(),
            credential_env: self.credential_env.clone(),
        })
    }
}

#[derive(Debug, Args)]
pub struct CodeArgs {
    #[arg(long)]
    pub lesson: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub backend: String,
    /// Gold labels to store with the lesson.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    /// Keep one session for the whole lesson.
    #[arg(long)]
    pub no_reset: bool,
    /// Ask the rule-verification questions before coding.
    #[arg(long)]
    pub verify_rules: bool,
    /// Probe codings that repeat a recent code set.
    #[arg(long)]
    pub stability_probe: bool,
    /// Leave the self-check line out of batch requests.
    #[arg(long)]
    pub no_self_check: bool,
    #[command(flatten)]
    pub chat: ChatArgs,
}

fn read(path: &Path) -> Result<String, OpError> {
    std::fs::read_to_string(path).map_err(|e| OpError::Invalid(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<InstructionConfig, OpError> {
    serde_json::from_str(&read(path)?).map_err(|e| OpError::Invalid(format!("{}: {e}", path.display())))
}

fn load_lesson(path: &Path) -> Result<Lesson, OpError> {
    let mut lesson =
        parse_transcript(&read(path)?).map_err(|e| OpError::Invalid(format!("{}: {e}", path.display())))?;
    if lesson.lesson_id.is_empty() {
        lesson.lesson_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(lesson)
}

fn load_gold(path: &Path, lesson: &Lesson, codebook: &Codebook) -> Result<GoldAnnotationSet, OpError> {
    parse_gold(&read(path)?, lesson, codebook).map_err(|e| OpError::Invalid(format!("{}: {e}", path.display())))
}

fn open_store(data: &Path) -> Result<Store, OpError> {
    let store = Store::open(data)?;
    for w in store.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(store)
}

/// Runs one parsed command, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), OpError> {
    let io = |e: std::io::Error| OpError::Runtime(e.to_string());
    match cli.command {
        Command::Compile { config, out: target } => {
            let config = load_config(&config)?;
            let doc = compile_instructions(&config).map_err(|e| OpError::Invalid(e.to_string()))?;
            if doc.near_budget() {
                eprintln!(
                    "warning: document uses {} of {} budgeted tokens",
                    doc.token_estimate, doc.token_budget
                );
            }
            match target {
                Some(path) => {
                    std::fs::write(&path, &doc.text).map_err(io)?;
                    let sidecar = path.with_extension("sections.json");
                    let json = serde_json::to_string_pretty(&doc.sidecar()).expect("sidecar serializes");
                    std::fs::write(&sidecar, json + "\n").map_err(io)?;
                    writeln!(out, "{}", doc.config_hash).map_err(io)?;
                }
                None => write!(out, "{}", doc.text).map_err(io)?,
            }
            eprintln!(
                "config {} compiled: {} of {} tokens",
                doc.config_hash, doc.token_estimate, doc.token_budget
            );
        }
        Command::Preset { name } => {
            let config = match name {
                PresetName::Cdas => cdas_config(),
                PresetName::CdasAnchors => cdas_config_with_anchors(),
            };
            writeln!(out, "{}", serde_json::to_string_pretty(&config).expect("config serializes")).map_err(io)?;
        }
        Command::Import { lesson, gold, config } => {
            let codebook = match config {
                Some(p) => load_config(&p)?.codebook,
                None => builtin_cdas(),
            };
            let lesson = load_lesson(&lesson)?;
            let gold = gold.map(|g| load_gold(&g, &lesson, &codebook)).transpose()?;
            let store = open_store(&cli.data)?;
            store.import_lesson(&lesson, gold.as_ref())?;
            writeln!(out, "{}", lesson.lesson_id).map_err(io)?;
        }
        Command::Code(args) => code(&cli.data, args, out)?,
        Command::Eval { run, gold, mode, format } => {
            let store = open_store(&cli.data)?;
            let gold = match gold {
                Some(path) => {
                    let record = store.load_run(&run)?;
                    let lesson = store.load_lesson(&record.run.lesson_id)?;
                    let config = store.load_config(&record.run.config_hash)?;
                    Some(load_gold(&path, &lesson, &config.codebook)?)
                }
                None => None,
            };
            let report = ops::evaluate(&store, &run, gold, mode.into())?;
            let mut text = match format {
                Format::Table => render_text(&report),
                Format::Json => render_json(&report),
                Format::Csv => render_csv(&report),
            };
            if !text.ends_with('\n') {
                text.push('\n');
            }
            write!(out, "{text}").map_err(io)?;
        }
        Command::Experiment { def, builtin, print_def } => {
            let (def, base) = match def {
                Some(path) => {
                    let def = ExperimentDefinition::from_json(&read(&path)?)
                        .map_err(|e| OpError::Invalid(format!("{}: {e}", path.display())))?;
                    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                    (def, base)
                }
                None => {
                    debug_assert!(builtin);
                    (builtin_experiment(), PathBuf::from("."))
                }
            };
            if print_def {
                writeln!(out, "{}", serde_json::to_string_pretty(&def).expect("definition serializes")).map_err(io)?;
                return Ok(());
            }
            let inputs = def.load_inputs(&base).map_err(|e| OpError::Invalid(e.to_string()))?;
            let backend = ops::backend_from_spec(&def.backend, &def.base_config.codebook)?;
            let store = open_store(&cli.data)?;
            let outcome = run_experiment(&def, &inputs, backend.as_ref()).map_err(|e| match e {
                dialogic_core::experiment::ExperimentError::RunFailed { .. } => OpError::Runtime(e.to_string()),
                other => OpError::Invalid(other.to_string()),
            })?;
            let record = ops::persist_experiment(&store, &def, &inputs, &outcome)?;
            write!(out, "{}", outcome.table.render_text()).map_err(io)?;
            for c in &record.conditions {
                writeln!(
                    out,
                    "{}: run {} config {} ({} examples, {} turns, {} tokens)",
                    c.condition_id, c.run_id, c.config_hash, c.example_count, c.example_turns, c.token_estimate
                )
                .map_err(io)?;
            }
        }
        Command::Adjudicate { run, turn, codes, note } => {
            let store = open_store(&cli.data)?;
            let item = ops::adjudicate(&store, &run, turn, &codes, &note)?;
            writeln!(out, "{}", serde_json::to_string(&item).expect("item serializes")).map_err(io)?;
        }
        Command::Feedback { run, allow_agreements } => {
            let store = open_store(&cli.data)?;
            let compiled = ops::compile_feedback(&store, &run, allow_agreements)?;
            writeln!(out, "{}", compiled.new_config_hash).map_err(io)?;
            eprintln!(
                "cycle {}: {} -> {} ({} examples added)",
                compiled.cycle, compiled.old_config_hash, compiled.new_config_hash, compiled.added_examples
            );
        }
        Command::Serve { port, host, chat } => {
            let store = open_store(&cli.data)?;
            let state = Arc::new(AppState {
                store,
                chat: chat.config(),
            });
            let runtime = tokio::runtime::Runtime::new().map_err(io)?;
            let addr = SocketAddr::new(host, port);
            runtime
                .block_on(api::serve(state, addr))
                .map_err(|e| OpError::Runtime(format!("cannot serve on {addr}: {e}")))?;
        }
    }
    Ok(())
}

fn code(data: &Path, args: CodeArgs, out: &mut dyn Write) -> Result<(), OpError> {
    let io = |e: std::io::Error| OpError::Runtime(e.to_string());
    if args.batch_size == 0 {
        return Err(OpError::Invalid("--batch-size must be at least 1".into()));
    }
    let config = load_config(&args.config)?;
    compile_instructions(&config).map_err(|e| OpError::Invalid(e.to_string()))?;
    let lesson = load_lesson(&args.lesson)?;
    let gold = args
        .gold
        .as_deref()
        .map(|g| load_gold(g, &lesson, &config.codebook))
        .transpose()?;
    let backend = ops::make_backend(&args.backend, &config.codebook, args.chat.config().as_ref())?;
    let policy = SessionPolicy {
        batch_size: args.batch_size,
        reset_between_batches: !args.no_reset,
        verify_rules_first: args.verify_rules,
        stability_probe: args.stability_probe,
        self_check_suffix: !args.no_self_check,
    };
    let store = open_store(data)?;
    store.import_lesson(&lesson, gold.as_ref())?;
    let hash = store.save_config(&config)?;
    let prepared = ops::prepare_run(&store, &lesson.lesson_id, &hash, policy, None)?;
    writeln!(out, "{}", prepared.run_id).map_err(io)?;
    let record = ops::execute_run(&store, &prepared, backend.as_ref())?;
    match &record.run.failure {
        Some(f) => Err(OpError::Runtime(format!(
            "run {} failed at batch {}: {}",
            prepared.run_id, f.batch_ordinal, f.reason
        ))),
        None => {
            eprintln!(
                "run {} complete: {} turns coded in {} sessions",
                prepared.run_id,
                record.run.codings.len(),
                record.run.session_count()
            );
            Ok(())
        }
    }
}

/// Parses `argv` and runs it. Returns the process exit status.
pub fn main_with(argv: impl IntoIterator<Item = String>, out: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
