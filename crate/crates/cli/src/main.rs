//! emuscan: scan byte streams for polymorphic shellcode by emulation,
//! generate ground-truth corpora, and evaluate the detector against them.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use emuscan_core::detector::ScanConfig;
use emuscan_core::InitPolicy;

#[derive(Parser)]
#[command(name = "emuscan", version, about = "Network-level emulation shellcode detector and corpus toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a byte stream from every offset and report verdicts.
    Scan(ScanArgs),
    /// Generate corpus samples with ground-truth sidecars.
    Gen(GenArgs),
    /// Evaluate the detector over a corpus directory plus background data.
    Eval(EvalArgs),
}

#[derive(Debug, Copy, Clone, Eq, PartialEq, ValueEnum)]
pub enum Format {
    Raw,
    Hex,
}

#[derive(Debug, Copy, Clone, Eq, PartialEq, ValueEnum)]
pub enum Profile {
    Baseline,
    Extended,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Baseline => "baseline",
            Profile::Extended => "extended",
        }
    }
}

#[derive(Debug, Copy, Clone, Eq, PartialEq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Copy, Clone, Eq, PartialEq, ValueEnum)]
pub enum RegisterPolicy {
    Zeroed,
    Randomized,
}

/// Detector tuning shared by scan and eval.
#[derive(Debug, Args)]
pub struct DetectorArgs {
    /// Distinct payload reads required after a GetPC event.
    #[arg(long, default_value_t = 8)]
    pub(crate) threshold: u32,
    /// Max retired instructions per chain.
    #[arg(long = "insn-budget", default_value_t = 8192)]
    pub(crate) insn_budget: u32,
    /// Max milliseconds per buffer (enforced between chains).
    #[arg(long = "wall-budget", default_value_t = 2000)]
    pub(crate) wall_budget: u64,
    /// Model the allocate/copy service calls instead of aborting.
    #[arg(long = "syscall-model", value_enum, default_value = "off")]
    pub(crate) syscall_model: Toggle,
    /// Register initialization before each chain.
    #[arg(long = "register-policy", value_enum, default_value = "zeroed")]
    pub(crate) register_policy: RegisterPolicy,
    /// Seed for every randomized component.
    #[arg(long, default_value_t = 42)]
    pub(crate) seed: u64,
    /// Worker threads for chain emulation.
    #[arg(long, default_value_t = 1)]
    pub(crate) jobs: usize,
}

impl DetectorArgs {
    pub fn scan_config(&self, profile: Profile) -> ScanConfig {
        let mut config = match profile {
            Profile::Baseline => ScanConfig::baseline(),
            Profile::Extended => ScanConfig::extended(),
        };
        config.payload_read_threshold = self.threshold;
        config.instruction_budget = self.insn_budget;
        config.wall_budget_ms = self.wall_budget;
        config.syscall_model = self.syscall_model == Toggle::On;
        config.register_policy = match self.register_policy {
            RegisterPolicy::Zeroed => InitPolicy::Zeroed,
            RegisterPolicy::Randomized => InitPolicy::Randomized { seed: self.seed },
        };
        config
    }

    pub fn init_workers(&self) {
        let n = self.jobs.max(1);
        // Ignore the error from re-initialization (tests call this twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Input file, or '-' for standard input.
    pub(crate) input: String,
    #[arg(long, value_enum, default_value = "raw")]
    pub(crate) format: Format,
    /// Heuristic profile: which GetPC idioms are recognized.
    #[arg(long, value_enum, default_value = "baseline")]
    pub(crate) profile: Profile,
    /// Largest slice of a stream inspected at once.
    #[arg(long = "chunk-max", default_value_t = 65536)]
    pub(crate) chunk_max: usize,
    /// Bytes shared between consecutive chunks.
    #[arg(long, default_value_t = 4096)]
    pub(crate) overlap: usize,
    /// Inspect only the first chunk of the stream.
    #[arg(long = "prefix-only")]
    pub(crate) prefix_only: bool,
    /// Write the structured report to this path.
    #[arg(long)]
    pub(crate) json: Option<PathBuf>,
    #[command(flatten)]
    pub(crate) detector: DetectorArgs,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Sample family (e.g. xor_call_rel, stack_scan_fs, syscall_copy).
    #[arg(long)]
    pub(crate) variant: String,
    #[arg(long, default_value_t = 1)]
    pub(crate) count: u32,
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,
    /// Output directory for .bin samples and .toml sidecars.
    #[arg(long)]
    pub(crate) out: PathBuf,
    #[arg(long = "payload-len", default_value_t = 64)]
    pub(crate) payload_len: usize,
    #[arg(long = "junk-density", default_value_t = 0.25)]
    pub(crate) junk_density: f32,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of .bin samples with .toml sidecars.
    #[arg(long)]
    pub(crate) corpus: PathBuf,
    /// Background bytes generated per kind for false-positive measurement.
    #[arg(long = "background-kib", default_value_t = 256)]
    pub(crate) background_kib: usize,
    #[arg(long = "chunk-max", default_value_t = 65536)]
    pub(crate) chunk_max: usize,
    #[arg(long, default_value_t = 4096)]
    pub(crate) overlap: usize,
    #[arg(long)]
    pub(crate) json: Option<PathBuf>,
    #[command(flatten)]
    pub(crate) detector: DetectorArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Scan(args) => commands::scan::run(&args),
        Command::Gen(args) => commands::gen::run(&args),
        Command::Eval(args) => commands::eval::run(&args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("emuscan: error: {err:#}");
            ExitCode::from(2)
        }
    }
}
