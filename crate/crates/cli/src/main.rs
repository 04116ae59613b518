//! `tarmt`: translate, revise and score constrained translation corpora.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 backend error, 4 partial
//! failure (some units failed, outputs still written).

mod commands;
mod config;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

/// Fixed default so unseeded runs are still reproducible.
pub const DEFAULT_SEED: u64 = 20240101;

#[derive(Debug, Parser)]
#[command(name = "tarmt", version, about = "Translate-and-revise constrained machine translation")]
pub struct Cli {
    /// Print a machine-readable description of every command and flag, then exit.
    #[arg(long, global = true)]
    help_json: bool,
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a corpus in a supported format to canonical JSONL.
    Import(ImportArgs),
    /// Check a corpus for duplicate ids, empty sources and unusable constraints.
    Validate(ValidateArgs),
    /// Translate and revise every unit; writes traces and a metric report.
    Run(RunArgs),
    /// Score traces or a hypothesis file against a corpus.
    Evaluate(EvaluateArgs),
    /// Per-iteration curves, constraint-count buckets and before/after deltas.
    Report(ReportArgs),
    /// Print the prompt templates the pipeline uses, or export them as files.
    PrintTemplates(PrintTemplatesArgs),
    /// Keep exactly k constraints per unit, dropping units with fewer.
    Subsample(SubsampleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Jsonl,
    DinuTsv,
    Wmt21Tt,
    LxmJson,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus file.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus file format.
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: Format,
    /// Canonical JSONL destination.
    #[arg(long)]
    pub output: PathBuf,
    /// Corpus name (defaults to the input file stem).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub src_lang: Option<String>,
    #[arg(long)]
    pub tgt_lang: Option<String>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Treat lexical units without constraints as errors.
    #[arg(long)]
    pub require_constraints: bool,
    /// Print issues as JSON lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// The model translates, then revises.
    LlmTranslate,
    /// Start from external hypotheses and only revise.
    NmtSeeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    None,
    NoUncompleted,
    NoOriginal,
    FlaggedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorArg {
    Rule,
    /// Ask the backend which constraints are met (experimental, less reliable).
    Llm,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Backend config (TOML). Secrets are read from the env var it names.
    #[arg(long)]
    pub backend: PathBuf,
    /// Trace output (JSONL, one line per unit).
    #[arg(long)]
    pub traces: PathBuf,
    /// Metric report output (JSON). Defaults to the trace path with `.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seed for template selection.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Revision budget; 0 translates only.
    #[arg(long, default_value_t = 3)]
    pub max_iters: usize,
    /// `default` for the three standard revise templates drawn at random,
    /// one template id for a fixed template, or a comma-separated id list.
    #[arg(long, default_value = "default")]
    pub ensemble: String,
    #[arg(long, value_enum, default_value_t = AblationArg::None)]
    pub ablation: AblationArg,
    /// Units processed concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::LlmTranslate)]
    pub mode: ModeArg,
    /// `unit_id<TAB>hypothesis` file for nmt-seeded runs. Without it the
    /// corpus's own seed hypotheses are used.
    #[arg(long)]
    pub hypotheses: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DetectorArg::Rule)]
    pub detector: DetectorArg,
    /// Translate template id.
    #[arg(long, default_value = tarmt_core::prompting::TRANSLATE_STANDARD_ID)]
    pub translate_template: String,
    /// Extra templates from a manifest (see print-templates --export).
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Drop the one-shot demonstration from prompts.
    #[arg(long)]
    pub zero_shot: bool,
    /// Persistent response cache file.
    #[arg(long, conflicts_with = "no_cache")]
    pub cache: Option<PathBuf>,
    /// Send every request to the backend, even repeats.
    #[arg(long)]
    pub no_cache: bool,
    /// Earlier trace file; units finished under the same config are reused.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Disable case folding when matching constraints.
    #[arg(long)]
    pub case_sensitive: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Trace file from `run`.
    #[arg(long, required_unless_present = "hypotheses", conflicts_with = "hypotheses")]
    pub traces: Option<PathBuf>,
    /// `unit_id<TAB>hypothesis` file from any system.
    #[arg(long)]
    pub hypotheses: Option<PathBuf>,
    /// Structural corpora: tag-aware BLEU plus SAR and SMR.
    #[arg(long)]
    pub xml: bool,
    /// Attach per-unit scores from another metric, `name=path` (TSV `id<TAB>score`).
    #[arg(long, value_name = "NAME=PATH")]
    pub external: Vec<String>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub case_sensitive: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(subcommand)]
    pub view: ReportView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum ReportView {
    /// Metrics, cost and time after every iteration.
    Curve {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_enum, default_value_t = OutFormat::Table)]
        output_format: OutFormat,
    },
    /// Final metrics grouped by number of constraints per unit.
    Buckets {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        traces: PathBuf,
        /// Lower bounds of the buckets, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        bounds: Vec<usize>,
        #[arg(long, value_enum, default_value_t = OutFormat::Table)]
        output_format: OutFormat,
    },
    /// Compare two metric reports, e.g. before and after revision.
    Delta {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long, value_enum, default_value_t = OutFormat::Table)]
        output_format: OutFormat,
    },
}

#[derive(Debug, Args)]
pub struct PrintTemplatesArgs {
    /// Only this template.
    #[arg(long)]
    pub id: Option<String>,
    /// Print the manifest as JSON instead of template bodies.
    #[arg(long)]
    pub json: bool,
    /// Write every template and a manifest.json into this directory.
    #[arg(long)]
    pub export: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SubsampleArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

/// Outcome classes, each with a fixed exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Backend(anyhow::Error),
    Partial(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
            Failure::Partial(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Backend(e) | Failure::Partial(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        if e.downcast_ref::<config::BackendSetupError>().is_some() {
            Failure::Backend(e)
        } else {
            Failure::Data(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.help_json {
        let text = serde_json::to_string_pretty(&help_json()).expect("json");
        let _ = writeln!(std::io::stdout(), "{text}");
        return ExitCode::SUCCESS;
    }
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let Some(command) = cli.command else {
        let _ = Cli::command().print_help();
        return ExitCode::from(1);
    };
    match commands::dispatch(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn help_json() -> Value {
    fn describe(cmd: &clap::Command) -> Value {
        let args: Vec<Value> = cmd
            .get_arguments()
            .filter(|a| a.get_id() != "help" && a.get_id() != "version")
            .map(|a| {
                json!({
                    "id": a.get_id().as_str(),
                    "long": a.get_long(),
                    "short": a.get_short().map(String::from),
                    "help": a.get_help().map(|h| h.to_string()),
                    "required": a.is_required_set(),
                    "takes_value": a.get_action().takes_values(),
                    "default": a.get_default_values().iter().map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>(),
                    "values": if a.get_action().takes_values() {
                        a.get_possible_values().iter().map(|v| v.get_name().to_string()).collect()
                    } else {
                        Vec::new()
                    },
                    "global": a.is_global_set(),
                })
            })
            .collect();
        let subs: Vec<Value> = cmd.get_subcommands().filter(|c| c.get_name() != "help").map(describe).collect();
        json!({
            "name": cmd.get_name(),
            "about": cmd.get_about().map(|a| a.to_string()),
            "args": args,
            "subcommands": subs,
        })
    }
    let mut root = describe(&Cli::command());
    root["exit_codes"] = json!({"0": "ok", "1": "usage", "2": "data error", "3": "backend error", "4": "partial failure"});
    root
}
