mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gmr_core::GmrError;

#[derive(Parser, Debug)]
#[command(name = "gmrconv", version, about = "Gaussian mixture ring convolution: benchmarks, checks and demos")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Worker threads for the convolution engines (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Zero wall-clock fields so reruns are byte-identical
    #[arg(long, global = true)]
    stable_output: bool,
    /// Write the report here instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Check the command's acceptance conditions; exit 3 when one fails
    #[arg(long = "assert", global = true)]
    check: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time dense, materialized-ring and two-stage convolutions
    Bench(commands::BenchArgs),
    /// Parameter counts of ring layers against dense layers
    Params(commands::ParamsArgs),
    /// Rotation equivariance error of a random ring layer over angles
    Equiv(commands::EquivArgs),
    /// Train the GMR and dense twins and evaluate on rotated test copies
    TrainDemo(commands::TrainDemoArgs),
    /// Write a freshly initialized ring layer to a .gmr file
    InitKernel(commands::InitKernelArgs),
    /// Print one ring or the materialized kernels of a .gmr file as CSV
    DumpKernel(commands::DumpKernelArgs),
}

/// How a command ended when it did not succeed.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Check(Vec<String>),
    Runtime(String),
}

impl From<GmrError> for Failure {
    fn from(e: GmrError) -> Self {
        match e {
            GmrError::InvalidArgument(_)
            | GmrError::UnsupportedWidth(_)
            | GmrError::DegenerateGeometry(_)
            | GmrError::OverResolution { .. }
            | GmrError::ChannelMismatch { .. }
            | GmrError::DimensionMismatch(_)
            | GmrError::Architecture(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = cli.global.clone();
    let body = move || match cli.command {
        Command::Bench(a) => commands::bench(&a, &g),
        Command::Params(a) => commands::params(&a, &g),
        Command::Equiv(a) => commands::equiv(&a, &g),
        Command::TrainDemo(a) => commands::train_demo(&a, &g),
        Command::InitKernel(a) => commands::init_kernel(&a, &g),
        Command::DumpKernel(a) => commands::dump_kernel(&a, &g),
    };
    match cli.global.threads {
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(t) => gmr_core::with_threads(t, body)?,
        None => body(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(failed)) => {
            for f in &failed {
                eprintln!("check failed: {f}");
            }
            ExitCode::from(3)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
