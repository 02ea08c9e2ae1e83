use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "vitsnn", version)]
#[command(about = "Convert small vision transformers to multi-threshold spiking networks and simulate them")]
struct Cli {
    /// Directory for generated files.
    #[arg(long, global = true, env = "VITSNN_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded random toy model and a synthetic dataset.
    GenToy(GenToyArgs),
    /// Derive per-site firing thresholds from activation statistics.
    Calibrate(CalibrateArgs),
    /// Build the spiking network archive from a model and thresholds.
    Convert(ConvertArgs),
    /// Simulate the spiking network and compare it with the exact model.
    Run(RunArgs),
    /// Evaluate the exact (non-spiking) model only.
    Oracle(OracleArgs),
    /// Run the built-in property suites.
    Verify(VerifyArgs),
    /// Render energy and T-sweep reports from a run report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Model archive directory.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Percentile used for the base thresholds.
    #[arg(long, default_value_t = 99.0)]
    percentile: f64,
    /// Thresholds per polarity.
    #[arg(short, long, default_value_t = 8)]
    n: usize,
    /// Number of dataset samples to draw statistics from.
    #[arg(long)]
    max_samples: Option<usize>,
    /// Output file (defaults to thresholds.json in the output directory).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    thresholds: PathBuf,
    /// Override the threshold count stored with each site.
    #[arg(short, long)]
    n: Option<usize>,
    /// Output archive directory (defaults to snn/ in the output directory).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Spiking network archive directory.
    #[arg(long)]
    snn: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(short = 'T', long, default_value_t = 8)]
    timesteps: usize,
    /// `mt` or `analog_ec_only`.
    #[arg(long, default_value = "mt")]
    mode: String,
    /// Only run the first this many samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Headline energy ratio counts every multiplication.
    #[arg(long)]
    strict_energy: bool,
    /// Energy per multiply-accumulate, pJ.
    #[arg(long, default_value_t = 4.6)]
    e_mac: f64,
    /// Energy per accumulate, pJ.
    #[arg(long, default_value_t = 0.9)]
    e_ac: f64,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Suite to run; repeat for several. All suites run when omitted.
    /// One of ec_identity, product_ec, bounds, complexity, neuron,
    /// normalization, lossless, conservation, naive.
    #[arg(long)]
    suite: Vec<String>,
    /// Case count for every selected suite.
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run report to render.
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let out = cli.out_dir;
    let res = match cli.command {
        Command::GenToy(a) => commands::gen_toy(&out, a.seed, a.samples),
        Command::Calibrate(a) => commands::calibrate(&out, &a),
        Command::Convert(a) => commands::convert(&out, &a),
        Command::Run(a) => commands::run(&out, &a),
        Command::Oracle(a) => commands::oracle(&out, &a),
        Command::Verify(a) => commands::verify(&out, &a),
        Command::Report(a) => commands::report(&out, &a.run),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
