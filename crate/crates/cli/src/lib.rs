//! `d2q` command-line front end.
//!
//! Exit codes: 0 success, 2 usage (including group-size divisibility),
//! 3 bad model artifact, 4 bad calibration or evaluation data, 5 internal
//! or write failure.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use d2q_core::Error;

mod commands;

pub use commands::run;

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const ARTIFACT: i32 = 3;
    pub const CALIBRATION: i32 = 4;
    pub const INTERNAL: i32 = 5;
}

/// Environment variable capping worker threads; 0 or unset means one per core.
pub const THREADS_ENV: &str = "D2Q_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Artifact(String),
    Calibration(String),
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Artifact(_) => exit::ARTIFACT,
            CliError::Calibration(_) => exit::CALIBRATION,
            CliError::Internal(_) => exit::INTERNAL,
        }
    }

    pub(crate) fn artifact(e: Error) -> Self {
        CliError::Artifact(e.to_string())
    }

    pub(crate) fn calibration(e: Error) -> Self {
        CliError::Calibration(e.to_string())
    }

    pub(crate) fn write(e: impl fmt::Display) -> Self {
        CliError::Internal(format!("write failed: {e}"))
    }

    /// Classifies errors raised while running an algorithm on loaded inputs.
    pub(crate) fn run(e: Error) -> Self {
        match e {
            Error::GroupSize { .. } | Error::UnsupportedBits(_) | Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            Error::Calibration(_) | Error::TokenOutOfRange { .. } | Error::SequenceTooLong { .. } | Error::EmptyInput(_) => {
                CliError::Calibration(e.to_string())
            }
            Error::Artifact(_) => CliError::Artifact(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Artifact(m) => write!(f, "artifact: {m}"),
            CliError::Calibration(m) => write!(f, "data: {m}"),
            CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "d2q", version, about = "Weight-only post-training quantization for toy byte-level transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random model artifact.
    Init(InitArgs),
    /// Quantize a model with dual-scale down-projection quantization and
    /// deviation-aware correction.
    Quantize(QuantizeArgs),
    /// Next-byte perplexity of a model over a text file.
    Eval(EvalArgs),
    /// Per-block deviation statistics from attention-only and MLP-only
    /// quantization of shadow copies.
    Diagnose(DiagnoseArgs),
    /// Print an artifact's manifest summary and compression ratio.
    Inspect(InspectArgs),
    /// Run the ablation grid and write its report.
    Ablate(AblateArgs),
}

fn parse_bits(s: &str) -> Result<u8, String> {
    match s {
        "2" | "3" | "4" | "8" => Ok(s.parse().expect("literal digits")),
        _ => Err(format!("unsupported bit width {s}; choose one of 2, 3, 4, 8")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct QuantArgs {
    /// Weight bit width.
    #[arg(long, default_value = "2", value_parser = parse_bits)]
    pub bits: u8,
    /// Columns per quantization group; 0 means one group per row. Defaults
    /// to 128 when the model dimensions allow it, otherwise 32.
    #[arg(long)]
    pub group: Option<usize>,
    /// Leave every weight in full precision (pipeline no-op check).
    #[arg(long)]
    pub identity: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CalibArgs {
    /// Number of calibration sequences.
    #[arg(long, default_value_t = 128)]
    pub calib_samples: usize,
    /// Calibration sequence length in bytes.
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub d_ffn: usize,
    #[arg(long, default_value_t = 128)]
    pub max_seq: usize,
    #[arg(long)]
    pub no_rope: bool,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Input model artifact.
    pub model: PathBuf,
    /// Calibration text file (bytes are tokens).
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path; defaults to the output path with a `.report.json` extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub calib_args: CalibArgs,
    #[arg(long, default_value_t = d2q_core::dsq::DEFAULT_DSQ_ITERS)]
    pub dsq_iters: usize,
    #[arg(long)]
    pub no_dsq: bool,
    #[arg(long)]
    pub no_dac: bool,
    /// Static smoothing of the down-projection instead of DSQ.
    #[arg(long, conflicts_with = "no_dsq")]
    pub static_smooth: bool,
    /// Keep the DSQ column scale explicit instead of folding it.
    #[arg(long)]
    pub no_fold: bool,
    /// Recorded in the report.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub text: PathBuf,
    /// Window length; 2048 is the full-scale setting.
    #[arg(long, default_value_t = d2q_core::eval::DEFAULT_EVAL_SEQ_LEN)]
    pub seq_len: usize,
    /// Full-precision reference for KL divergence and reconstruction errors.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Write the result as JSON; `-` writes to stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    pub model: PathBuf,
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub calib_args: CalibArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub model: PathBuf,
    /// Print the manifest as JSON instead of a summary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub model: PathBuf,
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out text; by default the last fifth of the calibration file is
    /// held out and the rest calibrates.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub calib_args: CalibArgs,
    #[arg(long, default_value_t = d2q_core::dsq::DEFAULT_DSQ_ITERS)]
    pub dsq_iters: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,3,15")]
    pub iters_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    pub calib_grid: Vec<usize>,
    #[arg(long)]
    pub no_static_smooth: bool,
    #[arg(long, default_value_t = d2q_core::eval::DEFAULT_EVAL_SEQ_LEN)]
    pub eval_seq_len: usize,
    #[arg(long, default_value_t = 32)]
    pub holdout_sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Sizes the global worker pool from [`THREADS_ENV`].
pub fn configure_threads() -> Result<(), CliError> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?,
        _ => 0,
    };
    if n > 0 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = configure_threads().and_then(|()| run(&cli));
    match result {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
