mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmbua::error::ErrorClass;
use gmbua::penalty::PenaltyKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Core(#[from] gmbua::error::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(..) => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Solver => 4,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gmbua", version, about = "Bundle-based multiscale sparse unmixing of hyperspectral cubes")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cube with ground truth.
    Synth(SynthArgs),
    /// Extract a bundle library from a cube.
    Extract(ExtractArgs),
    /// Unmix a cube with a given library.
    Unmix(UnmixArgs),
    /// Full pipeline: K randomized runs and consensus selection.
    Gmbua(GmbuaArgs),
    /// Monte-Carlo benchmark on synthetic data.
    Eval(EvalArgs),
    /// Render abundance maps as PGM images.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SynthFlags {
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    endmembers: Option<usize>,
    /// Target SNR in dB (`inf` for no noise).
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    variability: Option<f64>,
    #[arg(long)]
    bands: Option<usize>,
    /// Library file with the base signatures.
    #[arg(long)]
    signatures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Debug, Args)]
pub struct ExtractionFlags {
    #[arg(long)]
    endmembers: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    pixel_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    extraction: ExtractionFlags,
}

#[derive(Debug, Args)]
pub struct UnmixFlags {
    #[arg(long, value_enum)]
    penalty: Option<PenaltyArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_coarse: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    superpixels: Option<usize>,
    #[arg(long)]
    compactness: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Write per-iteration ADMM residual traces.
    #[arg(long)]
    trace: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum PenaltyArg {
    None,
    L1,
    Group,
    Elitist,
    Fractional,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::None => PenaltyKind::None,
            PenaltyArg::L1 => PenaltyKind::L1,
            PenaltyArg::Group => PenaltyKind::Group,
            PenaltyArg::Elitist => PenaltyKind::Elitist,
            PenaltyArg::Fractional => PenaltyKind::Fractional,
        }
    }
}

#[derive(Debug, Args)]
pub struct UnmixArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    unmix: UnmixFlags,
}

#[derive(Debug, Args)]
pub struct GmbuaArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of runs `K`.
    #[arg(long)]
    runs: Option<usize>,
    /// Ground-truth global abundances, for per-run SRE.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    extraction: ExtractionFlags,
    #[command(flatten)]
    unmix: UnmixFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods: fclsu, group, elitist, fractional, gmbua.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Monte-Carlo runs `R`.
    #[arg(long)]
    mc_runs: Option<usize>,
    /// Number of consensus runs `K` for GMBUA.
    #[arg(long)]
    runs: Option<usize>,
    /// Grid-search parameters before benchmarking.
    #[arg(long)]
    tune: bool,
    #[command(flatten)]
    synth: SynthFlags,
    #[command(flatten)]
    unmix: UnmixFlags,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Abundance dataset (global or bundle level).
    #[arg(long)]
    abundance: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Single material to render; all by default.
    #[arg(long)]
    material: Option<usize>,
    /// Image height; defaults to the dataset's `lines`.
    #[arg(long)]
    height: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cfg = config::CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(cfg, a),
        Command::Extract(a) => commands::extract(cfg, a),
        Command::Unmix(a) => commands::unmix(cfg, a),
        Command::Gmbua(a) => commands::gmbua(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Render(a) => commands::render(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
