mod commands;
mod inputs;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixtd_core::{Error, FormatMode, ThroughputSource};

#[derive(Parser)]
#[command(
    name = "mixtd",
    version,
    about = "Mixed SVD/CPD compression and accelerator design-space search for CNNs"
)]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    /// `tiny-cnn`, `resnet18-shapes` or a network manifest path.
    #[arg(long, default_value = "tiny-cnn")]
    pub model: String,
    /// Seeds probes, ALS initialization and the search.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone)]
pub struct PlatformArgs {
    /// `u250`, `desk`, `unlimited` or a platform TOML path.
    #[arg(long, default_value = "u250")]
    pub platform: String,
    /// Frames per pipeline fill used for the reported throughput.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Factorize every decomposable layer and write the factor blobs.
    Decompose {
        #[command(flatten)]
        model: ModelArgs,
        /// `resnet18-td` or a td-config TOML path.
        #[arg(long)]
        td_config: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Allocate unrolling and print the per-engine resource report.
    Allocate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        platform: PlatformArgs,
        /// Leave every layer dense when omitted.
        #[arg(long)]
        td_config: Option<String>,
    },
    /// Like `allocate`, plus the proxy accuracy of the decomposition.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        platform: PlatformArgs,
        #[arg(long)]
        td_config: Option<String>,
        /// `reconstruction`, `self-labeled` or a probe TOML path.
        #[arg(long, default_value = "reconstruction")]
        probe: String,
    },
    /// Evolutionary search over per-layer decompositions.
    Search(SearchArgs),
    /// Summarize search step logs into plot-ready tables.
    Report {
        /// `steps.csv` files written by `search`.
        logs: Vec<PathBuf>,
        /// `population.json` files for the compression table.
        #[arg(long)]
        population: Vec<PathBuf>,
        /// Network the populations were searched on, for compression ratios.
        #[arg(long)]
        model: Option<String>,
        /// Directory for the tables; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub platform: PlatformArgs,
    #[arg(long, default_value = "reconstruction")]
    pub probe: String,
    #[arg(long, default_value_t = 0.0)]
    pub fps_target: f64,
    #[arg(long, default_value = "exact", value_parser = parse_evaluator)]
    pub evaluator: ThroughputSource,
    #[arg(long, default_value = "mixed", value_parser = parse_mode)]
    pub format_mode: FormatMode,
    #[arg(long, default_value_t = 32)]
    pub population: usize,
    #[arg(long, default_value_t = 32)]
    pub children: usize,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Candidate `g1`/`g2` values.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4])]
    pub groups: Vec<usize>,
    /// Ranks as fractions of each layer's maximum rank.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0625, 0.125, 0.25, 0.5, 1.0])]
    pub rank_fractions: Vec<f64>,
    /// Exact steps before handing off to the throughput predictor.
    #[arg(long, default_value_t = 3)]
    pub surrogate_start: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_evaluator(s: &str) -> Result<ThroughputSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<FormatMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Rank { .. } | Error::Load { .. } => 2,
        Error::Budget(_) | Error::Infeasible(_) => 3,
        Error::Io { .. } => 4,
        Error::Parse { .. } => 5,
        Error::Numerical(_) | Error::Training(_) => 1,
    }
}

fn run(cli: Cli) -> mixtd_core::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    match cli.command {
        Command::Decompose {
            model,
            td_config,
            out,
        } => commands::decompose(&model, &td_config, &out),
        Command::Allocate {
            model,
            platform,
            td_config,
        } => commands::evaluate(&model, &platform, td_config.as_deref(), None),
        Command::Evaluate {
            model,
            platform,
            td_config,
            probe,
        } => commands::evaluate(&model, &platform, td_config.as_deref(), Some(&probe)),
        Command::Search(args) => commands::search(&args),
        Command::Report {
            logs,
            population,
            model,
            out,
        } => report::run(&logs, &population, model.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mixtd: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
