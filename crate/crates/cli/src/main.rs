//! `symtc` command line: dataset generation, shape synthesis, training,
//! evaluation and the gradient/ablation audits.
//!
//! Results go to stdout. Failures print one JSON object
//! `{"error":{"kind":..,"message":..}}` on stderr and exit nonzero.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "symtc", version, about = "Spine segmentation with SymTC and shape-model data synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    #[default]
    Text,
    Tsv,
    Json,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Micro,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient audit of every differentiable component.
    Gradcheck {
        /// Run only these suites (kernels, rmha, loss, micro_symtc, strain).
        #[arg(long)]
        suite: Vec<String>,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
    /// Procedural spine phantoms with masks, outlines and a manifest.
    Phantom(PhantomArgs),
    /// Statistical shape model.
    #[command(subcommand)]
    Ssm(SsmCommand),
    /// Every reference × every virtual shape through the hyperelastic transform.
    Synth(SynthArgs),
    /// Elastically deformed and translated copies of a dataset.
    Augment(AugmentArgs),
    /// Train a network from a run configuration.
    Train(TrainArgs),
    /// Per-class DSC and HD95 of a model on a dataset.
    Eval(EvalArgs),
    /// DSC under translations along one axis.
    Robustness(RobustnessArgs),
    /// Path-switch ablations with parameter accounting.
    Ablate(AblateArgs),
    /// Run configuration helpers.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// PhantomConfig JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub vertebrae: Option<usize>,
    #[arg(long)]
    pub discs: Option<usize>,
    /// Draw outlines from a shape model fitted to this many phantoms
    /// instead of independently.
    #[arg(long)]
    pub shape_model: Option<usize>,
    #[arg(long, default_value = "reference")]
    pub split: String,
}

#[derive(Subcommand)]
pub enum SsmCommand {
    /// Fit a shape model to the outlines of a manifest and/or shape files.
    Build {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long = "shape")]
        shapes: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        variance: f64,
        #[arg(long, default_value = "translation")]
        alignment: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw virtual shapes; shape `i` uses seed `seed + i`.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coefficients are truncated to ±clamp standard deviations.
        #[arg(long, default_value_t = 3.0)]
        clamp: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
pub struct SynthArgs {
    /// Manifest of reference images with outlines.
    #[arg(long)]
    pub references: PathBuf,
    /// Virtual shape set written by `ssm sample`.
    #[arg(long)]
    pub virtuals: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// SynthConfig JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds the transform network initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long, default_value = "synthetic")]
    pub split: String,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Node displacement std as a fraction of the grid cell size.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Control-grid sizes, one deformation per size.
    #[arg(long, value_delimiter = ',')]
    pub grids: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub max_shift: usize,
    /// Skip elastic deformation (translation only).
    #[arg(long)]
    pub no_elastic: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// RunConfig JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    /// Scored alongside the training DSC.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Weight file, rewritten atomically at every checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Stop once the training DSC reaches this value (%).
    #[arg(long)]
    pub stop_at_dsc: Option<f64>,
    /// Overrides both seeds of the run config (init = seed, data = seed + 1).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Per-epoch TSV log file.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub precision: Precision,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pixel spacing; HD95 is reported in pixels when absent.
    #[arg(long)]
    pub spacing: Option<f64>,
    #[arg(long, value_enum, default_value_t)]
    pub format: OutputFormat,
    #[arg(long, value_enum, default_value_t)]
    pub precision: Precision,
}

#[derive(Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "horizontal")]
    pub axis: String,
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40")]
    pub shifts: Vec<u32>,
    /// Intensity of vacated pixels.
    #[arg(long, default_value_t = 0.0)]
    pub fill: f64,
    #[arg(long, value_enum, default_value_t)]
    pub format: OutputFormat,
    #[arg(long, value_enum, default_value_t)]
    pub precision: Precision,
}

#[derive(Args)]
pub struct AblateArgs {
    /// RunConfig JSON supplying the base network and training settings.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Train each setting on this manifest (requires --test).
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,40")]
    pub shifts: Vec<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t)]
    pub format: OutputFormat,
}

#[derive(Subcommand)]
pub enum ConfigCommand {
    /// JSON schema of the run configuration.
    Schema,
    /// A complete default run configuration.
    Default {
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        #[arg(long, default_value_t = 12)]
        classes: usize,
    },
    /// Parse and validate a run configuration.
    Check { path: PathBuf },
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Gradcheck { suite, format } => commands::gradcheck(&suite, format),
        Command::Phantom(a) => commands::phantom(&a),
        Command::Ssm(c) => commands::ssm(&c),
        Command::Synth(a) => commands::synth(&a),
        Command::Augment(a) => commands::augment(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Robustness(a) => commands::robustness(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Config(c) => commands::config(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
