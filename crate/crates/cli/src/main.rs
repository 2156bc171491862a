//! `capsbeam`: synthetic acquisition, beamforming, capsule-network
//! inference, pruning, quantization and accelerator simulation from files.

mod artifacts;
mod commands;
mod compare;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "capsbeam", version, about = "Plane-wave ultrasound beamforming with a capsule-network beamformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// INI pipeline config; built-in defaults when omitted
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Seed for phantoms, noise and random weights
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Das,
    DasHann,
    Mvdr,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum PruneMethodArg {
    Magnitude,
    Lakp,
    LakpMl,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Float,
    Fixed,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum PolicyArg {
    ReloadPerBlock,
    WeightsResident,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum OrderArg {
    BiasThenRelu,
    ReluThenBias,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate raw channel data of the configured phantom, one file per transmit angle
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Time-of-flight correct raw channel data onto the pixel grid
    Tofc {
        #[command(flatten)]
        common: Common,
        /// Raw channel data, one file per configured transmit angle
        #[arg(long = "in", value_name = "FILE", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
    /// Beamform ToF-corrected data; several inputs are compounded
    Beamform {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long = "in", value_name = "FILE", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
    /// Run the capsule-network beamformer
    Infer {
        #[command(flatten)]
        common: Common,
        /// Weight bundle; seeded random weights when omitted
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Arithmetic path; [quant] mode when omitted
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Prune conv kernels and write a compacted bundle plus a report
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<PruneMethodArg>,
        /// Look-ahead depth for lakp_ml
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        /// Ratio sweep: keep the largest ratio whose image passes the gates
        #[arg(long, value_delimiter = ',', num_args = 1.., requires = "sweep_input")]
        ratios: Vec<f64>,
        /// ToF-corrected input imaged at every swept ratio
        #[arg(long = "in", value_name = "FILE", id = "sweep_input")]
        input: Option<PathBuf>,
        /// Largest allowed contrast-ratio loss (dB) against the unpruned image
        #[arg(long)]
        max_cr_loss_db: Option<f64>,
        /// Largest allowed lateral FWHM growth (%) against the unpruned image
        #[arg(long)]
        max_fwhm_growth_pct: Option<f64>,
    },
    /// Calibrate fixed-point scales and store them in the bundle
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        /// Calibration inputs (ToF-corrected)
        #[arg(long = "in", value_name = "FILE", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
    /// Accelerator transactions, cycles and latency; functional run with --weights and --in
    Sim {
        #[command(flatten)]
        common: Common,
        /// Single layer by name (conv0, conv1, caps0, ...); whole network when omitted
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Conv epilogue order; [quant] relu_bias_order when omitted
        #[arg(long, value_enum)]
        order: Option<OrderArg>,
        /// Quantized bundle for the functional run
        #[arg(long, value_name = "FILE", requires = "input")]
        weights: Option<PathBuf>,
        #[arg(long = "in", value_name = "FILE", requires = "weights")]
        input: Option<PathBuf>,
        /// Fail unless the simulated output equals fixed-point inference bit for bit
        #[arg(long, requires = "input")]
        check: bool,
    },
    /// Image-quality metrics of envelope images over the configured regions
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "FILE", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
    /// Side-by-side metrics of two output directories
    Compare {
        #[arg(value_name = "RUN_A")]
        run_a: PathBuf,
        #[arg(value_name = "RUN_B")]
        run_b: PathBuf,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Parameter, FLOP and latency summary of the configured network
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("CAPSBEAM_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("CAPSBEAM_THREADS=`{v}` is not a thread count"))?;
    if n == 0 {
        anyhow::bail!("CAPSBEAM_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match configure_threads().and_then(|_| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
