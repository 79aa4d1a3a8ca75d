//! `imgloss` command-line tool: corruption, training, restoration,
//! evaluation, gradient checks and SSIM demos.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 input error,
//! 3 artifact or format error.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use imgloss::image::ImageFormat;
use imgloss::loss::LossKind;
use imgloss::pipeline::{BayerPattern, CorruptionKind, CorruptionSpec, NoiseModel};

pub mod commands;
pub mod config;
pub mod demo;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_ARTIFACT: i32 = 3;

/// Error carrying the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn artifact(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_ARTIFACT,
            message: message.into(),
        }
    }

    pub fn verify(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VERIFY,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<imgloss::Error> for CliError {
    fn from(e: imgloss::Error) -> Self {
        use imgloss::Error as E;
        let code = match &e {
            E::Io { .. } | E::InvalidArgument(_) | E::ShapeMismatch(_) => EXIT_INPUT,
            E::Format(_) | E::Checkpoint { .. } | E::NoForwardCache => EXIT_ARTIFACT,
            E::NonFiniteLoss { .. } => EXIT_VERIFY,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "imgloss",
    version,
    about = "Image-restoration loss experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Corrupt clean images and write input/target pairs plus a manifest
    Corrupt(CorruptArgs),
    /// Train a network and write checkpoints plus a history CSV
    Train(TrainArgs),
    /// Restore images with a trained checkpoint
    Restore(RestoreArgs),
    /// Score restored images against references (CSV report)
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// SSIM window-size and bias demos (CSV)
    Demo(DemoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    /// y + sqrt(a*y + b) * N(0, 1)
    Gaussian,
    /// a * Poisson(y / a) + sqrt(b) * N(0, 1)
    Poisson,
}

impl From<NoiseArg> for NoiseModel {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Gaussian => NoiseModel::Gaussian,
            NoiseArg::Poisson => NoiseModel::Poisson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Pfm,
    Ppm,
    Pgm,
}

impl From<FormatArg> for ImageFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Pfm => ImageFormat::Pfm,
            FormatArg::Ppm => ImageFormat::Ppm,
            FormatArg::Pgm => ImageFormat::Pgm,
        }
    }
}

/// Corruption process shared by `corrupt` and `train`.
#[derive(Args, Debug, Clone)]
pub struct CorruptionArgs {
    /// Task: denoise_demosaick, superres or external_pairs
    #[arg(long, default_value = "denoise_demosaick")]
    pub task: CorruptionKind,
    /// Signal-dependent noise coefficient
    #[arg(long, default_value_t = 0.005)]
    pub a: f64,
    /// Signal-independent noise variance
    #[arg(long, default_value_t = 0.0001)]
    pub b: f64,
    /// Bayer layout: rggb, bggr, grbg or gbrg
    #[arg(long, default_value = "rggb")]
    pub pattern: BayerPattern,
    /// Super-resolution factor
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    #[arg(long, value_enum, default_value_t = NoiseArg::Gaussian)]
    pub noise_model: NoiseArg,
}

impl CorruptionArgs {
    pub fn spec(&self, seed: u64) -> CorruptionSpec {
        CorruptionSpec {
            kind: self.task,
            a: self.a,
            b: self.b,
            pattern: self.pattern,
            scale: self.scale,
            seed,
            noise_model: self.noise_model.into(),
        }
    }
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    /// Clean images (PGM, PPM or PFM)
    pub inputs: Vec<PathBuf>,
    /// File with one clean image path per line
    #[arg(long)]
    pub input_list: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "corrupted")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub corruption: CorruptionArgs,
    /// Noise seed (image i uses seed XOR i)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output image format
    #[arg(long, value_enum, default_value_t = FormatArg::Pfm)]
    pub format: FormatArg,
    /// Flat `key = value` file with defaults for these flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training list: `clean` paths (corrupted per --task) or `input<TAB>target` pairs
    #[arg(long)]
    pub train_list: PathBuf,
    /// Validation list in the same format
    #[arg(long)]
    pub val_list: Option<PathBuf>,
    /// Output directory for model_init.ckpt, model.ckpt and history.csv
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub corruption: CorruptionArgs,
    /// Seed for corrupting clean list entries
    #[arg(long, default_value_t = 0)]
    pub corruption_seed: u64,
    /// Loss: l1, l2, ssim (sigma 5), ssim<sigma>, msssim or mix
    #[arg(long, default_value = "mix")]
    pub loss: LossKind,
    /// Switch to another loss at an epoch, e.g. `l2@50`
    #[arg(long)]
    pub switch_loss: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Learning rate [default: 1e-3 for l1/l2, 1e-4 for the SSIM family]
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Patch side
    #[arg(long, default_value_t = 31)]
    pub patch: usize,
    /// Patch stride
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    /// Hidden channels of the conv9-conv5-conv5 network
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Seed for weight initialisation and shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Validation metrics every N epochs (and at the last)
    #[arg(long, default_value_t = 1)]
    pub validate_every: usize,
    /// Flat `key = value` file with defaults for these flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    /// Network checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Images to restore
    pub inputs: Vec<PathBuf>,
    /// List of images, or `input<TAB>target` manifest (writes restored.tsv)
    #[arg(long)]
    pub input_list: Option<PathBuf>,
    /// Output directory [default: next to each input]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Appended to the input file stem
    #[arg(long, default_value = "_restored")]
    pub suffix: String,
    /// Output format [default: same as the input]
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Flat `key = value` file with defaults for these flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Manifest of `restored<TAB>reference` pairs
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// List of restored images (paired line by line with --reference-list)
    #[arg(long)]
    pub restored_list: Option<PathBuf>,
    #[arg(long)]
    pub reference_list: Option<PathBuf>,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat `key = value` file with defaults for these flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random patch pairs per loss
    #[arg(long, default_value_t = 10)]
    pub patches: usize,
    #[arg(long, default_value_t = 31)]
    pub patch_size: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Sampled parameters per loss for the default network (0 skips it)
    #[arg(long, default_value_t = 24)]
    pub net_samples: usize,
    /// Debug: add this relative error to every analytic gradient entry
    #[arg(long, default_value_t = 0.0)]
    pub perturb_analytic: f64,
    /// Flat `key = value` file with defaults for these flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DemoName {
    /// Mean SSIM across a noisy step edge for sigma 1, 3 and 9
    Edge,
    /// SSIM of constant patches against a uniform bias, per background level
    Bias,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long, value_enum)]
    pub demo: DemoName,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise draws for the edge demo
    #[arg(long, default_value_t = 200)]
    pub draws: usize,
    /// Noise standard deviation for the edge demo
    #[arg(long, default_value_t = 0.15)]
    pub noise_sd: f64,
    /// Uniform bias for the bias demo
    #[arg(long, default_value_t = 0.1)]
    pub bias: f64,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat `key = value` file with defaults for these flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses arguments (merging any `--config` file) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse(&args) {
        Ok(cli) => cli,
        Err(Parsed::Exit(code)) => return code,
        Err(Parsed::Error(e)) => {
            eprintln!("error: {e}");
            return e.code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

enum Parsed {
    Exit(i32),
    Error(CliError),
}

fn clap_exit(e: clap::Error) -> Parsed {
    let _ = e.print();
    match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            Parsed::Exit(EXIT_OK)
        }
        _ => Parsed::Exit(EXIT_INPUT),
    }
}

fn parse(args: &[OsString]) -> std::result::Result<Cli, Parsed> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(args).map_err(clap_exit)?;
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let config = sub_matches.get_one::<PathBuf>("config").cloned();
    let mut full = args.to_vec();
    if let Some(path) = config {
        let sub = cmd
            .find_subcommand(name)
            .expect("matched subcommand exists");
        let extra = config::config_args(&path, sub, sub_matches).map_err(Parsed::Error)?;
        full.extend(extra);
    }
    let matches = cmd.try_get_matches_from(&full).map_err(clap_exit)?;
    Cli::from_arg_matches(&matches).map_err(clap_exit)
}
