//! `detail`: score, rank, and curate in-context demonstrations from embedding dumps.

mod commands;
mod summary;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use detail_core::data_io::OutputFormat;
use detail_core::tasks::{PerturbMode, ReorderPolicy, Which};
use detail_core::{Error, ErrorKind, ScoreMode, DEFAULT_PROJ_DIM};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "detail",
    version,
    about = "Influence-based attribution of in-context demonstrations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every demonstration of one dump.
    Score(ScoreArgs),
    /// Rank demonstrations by self-influence and report how fast noisy ones surface.
    Detect(DetectArgs),
    /// Produce a demonstration ordering from self-influence scores.
    Reorder(ReorderArgs),
    /// Plan removal of the least helpful demonstrations against a validation set.
    Curate(CurateArgs),
    /// Remove or corrupt demonstrations in score order and track query accuracy.
    Perturb(PerturbArgs),
    /// Generate a synthetic manifest of dumps.
    Synth(SynthArgs),
    /// Compare test-mode scores with an exact leave-one-out refit.
    Oracle(OracleArgs),
}

/// Flags shared by every command that projects embeddings.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ProjectionArgs {
    /// Target width of the random projection; 0, or any value >= the embedding width, disables it.
    #[arg(long, default_value_t = DEFAULT_PROJ_DIM)]
    pub proj_dim: usize,
    /// Seed of the projection matrix and of any sampled perturbation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value = "json", value_parser = parse_format)]
    #[serde(serialize_with = "serialize_format")]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct JobsArgs {
    /// Worker threads for manifest-level commands; 0 uses every core.
    #[arg(long, env = "DETAIL_JOBS", default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, default_value = "test", value_parser = parse_text::<ScoreMode>)]
    pub mode: ScoreMode,
    #[command(flatten)]
    #[serde(flatten)]
    pub projection: ProjectionArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long, short)]
    pub manifest: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub projection: ProjectionArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub jobs: JobsArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReorderArgs {
    /// Dump to score in self mode.
    #[arg(long, short, conflicts_with = "scores", required_unless_present = "scores")]
    pub input: Option<PathBuf>,
    /// Precomputed self-influence scores (JSON written by `detail score --mode self`).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value = "top2_front_then_ascending", value_parser = parse_text::<ReorderPolicy>)]
    #[serde(serialize_with = "serialize_display")]
    pub policy: ReorderPolicy,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub projection: ProjectionArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CurateArgs {
    #[arg(long, short)]
    pub manifest: PathBuf,
    /// Dump whose labelled rows are the validation anchors.
    #[arg(long)]
    pub validation: PathBuf,
    #[arg(long, short)]
    pub k: usize,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub projection: ProjectionArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub jobs: JobsArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PerturbArgs {
    #[arg(long, short)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "remove", value_parser = parse_text::<PerturbMode>)]
    pub mode: PerturbMode,
    #[arg(long, value_parser = parse_text::<Which>)]
    pub which: Which,
    #[arg(long, short)]
    pub k: usize,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// External predictions keyed `<id>/<mode>/<which>/<step>`; defaults to the ridge classifier.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub projection: ProjectionArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub jobs: JobsArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Generator configuration (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Directory that receives the dumps and `manifest.json`.
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutputArgs,
}

fn parse_text<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    parse_text(s)
}

fn serialize_format<S: serde::Serializer>(f: &OutputFormat, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match f {
        OutputFormat::Csv => "csv",
        OutputFormat::Json => "json",
    })
}

fn serialize_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// A failure plus where it happened (command, file, or flag).
#[derive(Debug)]
pub struct CliError {
    pub context: String,
    pub source: Error,
}

impl CliError {
    pub fn new(context: impl Into<String>, source: Error) -> Self {
        Self {
            context: context.into(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self.source.kind() {
            ErrorKind::Validation => 2,
            ErrorKind::Numerical => 3,
            ErrorKind::Io => 4,
        }
    }

    fn field(&self) -> Option<&'static str> {
        match &self.source {
            Error::MissingQueryLabel(_) => Some("query_label"),
            Error::InvalidArgument { name, .. } => Some(name),
            Error::LabelOutOfRange { .. } => Some("labels"),
            _ => None,
        }
    }

    /// One line of JSON on stderr so callers can parse failures.
    fn report(&self) {
        let kind = match self.source.kind() {
            ErrorKind::Validation => "validation",
            ErrorKind::Numerical => "numerical",
            ErrorKind::Io => "io",
        };
        let line = serde_json::json!({
            "error": kind,
            "exit_code": self.exit_code(),
            "context": self.context,
            "field": self.field(),
            "message": self.source.to_string(),
        });
        eprintln!("{line}");
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Extension for attaching context to core results.
pub trait Context<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for detail_core::Result<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::new(ctx(), e))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            let line = serde_json::json!({
                "error": "validation",
                "exit_code": 2,
                "context": "arguments",
                "field": null,
                "message": first.trim_start_matches("error: "),
            });
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Score(a) => commands::score(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Reorder(a) => commands::reorder(&a),
        Command::Curate(a) => commands::curate(&a),
        Command::Perturb(a) => commands::perturb(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Oracle(a) => commands::oracle(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            ExitCode::from(e.exit_code())
        }
    }
}
