mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use psp_core::dataforge::dataset::Task;
use psp_core::latentops::MixPreset;
use psp_core::psp::Variant;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Failure carrying its exit code; printed as one `error[kind]: message` line.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            msg: msg.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            EXIT_USAGE => "usage",
            EXIT_NUMERIC => "numeric",
            _ => "validation",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind(), self.msg.replace('\n', " "))
    }
}

impl From<psp_core::Error> for CliError {
    fn from(e: psp_core::Error) -> Self {
        match e {
            psp_core::Error::NonFinite(_) => CliError::numeric(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::validation(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "psp",
    version,
    about = "Train and run pyramid style encoders on synthetic faces"
)]
struct Cli {
    /// TOML run configuration with [data] [generator] [encoder] [train] [eval] [mix] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; falls back to the config file, then PSP_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset with a JSON-lines manifest.
    GenData(GenDataArgs),
    /// Pretrain the generator on procedural renders.
    PretrainGen(PretrainGenArgs),
    /// Build the perceptual net and pretrain the recognition and pose nets.
    PretrainAux(PretrainAuxArgs),
    /// Train an encoder against a frozen generator.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Reconstruct one image through encoder and generator.
    Invert(InvertArgs),
    /// Multi-modal synthesis by resampling a style range.
    Synth(SynthArgs),
    /// Interpolate between the codes of two images.
    Interp(InterpArgs),
    /// Apply one degradation to an image.
    Degrade(DegradeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainGenArgs {
    /// Output generator file (NTF1).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainAuxArgs {
    /// Output file holding the F/, R/ and P/ networks (NTF1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    task: Option<Task>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generator file from pretrain-gen.
    #[arg(long)]
    generator: PathBuf,
    /// Auxiliary networks from pretrain-aux.
    #[arg(long)]
    aux: PathBuf,
    /// Directory for checkpoints, metrics and previews.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    split: PathBuf,
    /// Which split of the dataset to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    which: SplitArg,
    #[arg(long)]
    aux: PathBuf,
    /// Append the report to this JSON-lines log.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct InvertArgs {
    /// Condition image: PPM/PGM, or NTF1 with a `condition` tensor.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output image (PPM).
    #[arg(long)]
    out: PathBuf,
    /// Also write the latent code (NTF1).
    #[arg(long)]
    code: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Number of resampled outputs.
    #[arg(long)]
    multimodal: Option<usize>,
    #[arg(long)]
    mix_preset: Option<MixPreset>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InterpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Frames including both endpoints.
    #[arg(long)]
    steps: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DegradeOp {
    Sketch,
    Downsample,
    Mask,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long, value_enum)]
    op: DegradeOp,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Down-sampling factor.
    #[arg(long, default_value_t = 1)]
    factor: usize,
    /// Write the bicubic re-upsampled image instead of the low-resolution one.
    #[arg(long)]
    restore: bool,
    /// Occluded fraction for `mask`.
    #[arg(long, default_value_t = 0.3)]
    coverage: f64,
    /// Also write the mask (NTF1) for `mask`.
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random points per primitive.
    #[arg(long, default_value_t = 10)]
    points: usize,
    /// Skip the encoder and loss composition check.
    #[arg(long)]
    primitives_only: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
