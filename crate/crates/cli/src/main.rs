//! `simat`: build, evaluate and sweep image transformation benchmarks.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use simat_core::dataset::StageError;
use simat_core::train::{HeadKind, LossForm, OptimizerKind};
use simat_core::{DeltaMethod, Error, Field, Split, Strategy};

#[derive(Parser, Debug)]
#[command(name = "simat", version, about = "Text-driven image transformation benchmark")]
struct Cli {
    /// key=value file supplying defaults for any long flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build benchmark metadata from a scene graph.
    Build(BuildArgs),
    /// Generate a synthetic compositional bundle.
    Synth(SynthArgs),
    /// Train adaptation heads on paired features.
    Train(TrainArgs),
    /// Check contrastive loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run one transformation and print the ranked hits.
    Transform(TransformArgs),
    /// Score a bundle.
    Eval(EvalArgs),
    /// Score a bundle over a lambda grid, per strategy and head checkpoint.
    Sweep(SweepArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    None,
    Mock,
    Table,
    Remote,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    All,
    Dev,
    Test,
}

impl SplitArg {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitArg::All => None,
            SplitArg::Dev => Some(Split::Dev),
            SplitArg::Test => Some(Split::Test),
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Both,
}

#[derive(Args, Debug, Serialize)]
pub struct OracleArgs {
    /// Oracle used for filtering or scoring. Defaults to `table` when the
    /// bundle has an oracle.tsv, `mock` otherwise (`none` for build).
    #[arg(long, value_enum)]
    pub oracle: Option<OracleKind>,
    /// Probability table (image_id, caption_id, probability).
    #[arg(long)]
    pub oracle_table: Option<PathBuf>,
    /// Remote oracle base URL; falls back to SIMAT_ORACLE_URL.
    #[arg(long)]
    pub oracle_url: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildArgs {
    #[arg(long)]
    pub scene_graph: PathBuf,
    /// Subject allowlist, one token per line.
    #[arg(long)]
    pub subjects: PathBuf,
    /// Relation allowlist, one token per line.
    #[arg(long)]
    pub relations: PathBuf,
    /// Per-triplet caption overrides (subject, relation, object, text).
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[arg(long, default_value_t = 0.9)]
    pub oracle_hi: f64,
    #[arg(long, default_value_t = 0.1)]
    pub oracle_lo: f64,
    #[arg(long, default_value_t = 10)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 2)]
    pub min_images: usize,
    #[arg(long, default_value = simat_core::dataset::DEFAULT_TEMPLATE)]
    pub template: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub num_subjects: usize,
    #[arg(long, default_value_t = 4)]
    pub num_relations: usize,
    #[arg(long, default_value_t = 4)]
    pub num_objects: usize,
    #[arg(long, default_value_t = 5)]
    pub images_per_triplet: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Image features (SMAT). Row i pairs with text row i unless --pairs is given.
    #[arg(long, required_unless_present = "alignable_pairs")]
    pub images: Option<PathBuf>,
    /// Text features (SMAT).
    #[arg(long, required_unless_present = "alignable_pairs")]
    pub texts: Option<PathBuf>,
    /// Pair list (image_id, text_id) resolved through the .ids sidecars.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Train on generated linearly-alignable features instead of files.
    #[arg(long, conflicts_with_all = ["images", "texts", "pairs"])]
    pub alignable_pairs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub alignable_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = HeadArg::Linear)]
    pub head: HeadArg,
    #[arg(long, default_value_t = 512)]
    pub out_dim: usize,
    /// Hidden width of mlp4 heads (default: input dim).
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_enum, default_value_t = LossArg::Infonce)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadArg {
    Linear,
    Mlp4,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Linear => HeadKind::Linear,
            HeadArg::Mlp4 => HeadKind::Mlp4,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Infonce,
    PaperLiteral,
}

impl From<LossArg> for LossForm {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Infonce => LossForm::InfoNce,
            LossArg::PaperLiteral => LossForm::PaperLiteral,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Number of random batches checked.
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
    #[arg(long, value_enum, default_value_t = LossArg::Infonce)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct RetrievalArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value = "delta")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 1)]
    pub topn: usize,
    /// Delta construction: word or sentence.
    #[arg(long, default_value = "word")]
    pub delta: DeltaMethod,
    /// Rescale deltas to unit norm before applying lambda.
    #[arg(long)]
    pub unit_delta: bool,
    /// Keep the source image among the candidates.
    #[arg(long)]
    pub include_self: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TransformArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run a stored query by id.
    #[arg(long, conflicts_with_all = ["image", "from", "to", "field"])]
    pub query: Option<String>,
    #[arg(long, required_unless_present = "query")]
    pub image: Option<String>,
    #[arg(long, required_unless_present = "query")]
    pub from: Option<String>,
    #[arg(long, required_unless_present = "query")]
    pub to: Option<String>,
    /// Slot to substitute; inferred from --from when omitted.
    #[arg(long)]
    pub field: Option<Field>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Directory with image_head.smhd and text_head.smhd.
    #[arg(long)]
    pub heads: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub oracle: OracleArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Also write the per-target breakdown table.
    #[arg(long)]
    pub breakdown: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Both)]
    pub format: ReportFormat,
    #[arg(long)]
    pub heads: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub oracle: OracleArgs,
    /// Comma-separated lambda grid.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1,1.25,1.5,1.75,2,2.25,2.5,2.75,3")]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "delta")]
    pub strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 1)]
    pub topn: usize,
    #[arg(long, default_value = "word")]
    pub delta: DeltaMethod,
    #[arg(long)]
    pub unit_delta: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Head checkpoint directory, optionally keyed as TAU=DIR. Repeatable.
    #[arg(long)]
    pub heads: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError { code: EXIT_NUMERIC, message: message.into() }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Lookup(_) => EXIT_USAGE,
        // A missing input path is a usage mistake, not bad data.
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError { code: exit_code(&e), message: e.to_string() }
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        CliError { code: exit_code(&e.error), message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let argv = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.message);
            return ExitCode::from(e.code);
        }
    };
    let cli = Cli::parse_from(argv);
    let result = match &cli.command {
        Command::Build(a) => commands::build(a, cli.config.as_deref()),
        Command::Synth(a) => commands::synth(a, cli.config.as_deref()),
        Command::Train(a) => commands::train(a, cli.config.as_deref()),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Transform(a) => commands::transform(a),
        Command::Eval(a) => commands::eval(a, cli.config.as_deref()),
        Command::Sweep(a) => commands::sweep(a, cli.config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
