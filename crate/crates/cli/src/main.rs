//! `neosim`: plan, simulate, sweep, verify, cache and report.

mod commands;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use output::Format;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Io(String),
    Infeasible(String),
    VerifyFailed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Io(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::VerifyFailed(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Infeasible(m) => write!(f, "infeasible: {m}"),
            CliError::VerifyFailed(m) => write!(f, "verification failed: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "neosim",
    version,
    about = "Sharding planner and performance model for embedding-heavy recommendation training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for report files; without it the report goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Args, Clone)]
pub struct PlanKnobs {
    /// Partitioning heuristic: kk or greedy.
    #[arg(long, default_value = "kk")]
    pub heuristic: String,
    /// Cost weights as comm,load,latency.
    #[arg(long, default_value = "1,1,1")]
    pub weights: String,
    /// Store every table in this precision (fp32 or fp16).
    #[arg(long)]
    pub table_precision: Option<String>,
    /// Keep one optimizer accumulator per element instead of per row.
    #[arg(long)]
    pub elementwise_state: bool,
    /// Offer row and column splits even for tables that fit one worker.
    #[arg(long)]
    pub finer_grain: bool,
    #[arg(long, default_value_t = 4)]
    pub max_col_shards: usize,
    /// Largest table eligible for replication; default is HBM / 1000.
    #[arg(long)]
    pub dp_threshold_bytes: Option<u64>,
}

#[derive(Args, Clone)]
pub struct PerfKnobs {
    /// Row cache hit rate for workers that spill into host memory.
    #[arg(long, default_value_t = 1.0)]
    pub hit_rate: f64,
    /// Wire format of forward pooled embeddings (fp32, fp16, bf16).
    #[arg(long)]
    pub fwd_comm: Option<String>,
    /// Wire format of backward pooled gradients.
    #[arg(long)]
    pub bwd_comm: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a sharding plan.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[command(flatten)]
        knobs: PlanKnobs,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate iteration latency and throughput for one plan.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        /// Plan file; planned on the fly when absent.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        knobs: PlanKnobs,
        #[command(flatten)]
        perf: PerfKnobs,
        #[command(flatten)]
        common: Common,
    },
    /// Weak-scaling sweep over node counts.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        nodes: Vec<usize>,
        #[command(flatten)]
        knobs: PlanKnobs,
        #[command(flatten)]
        perf: PerfKnobs,
        #[command(flatten)]
        common: Common,
    },
    /// Run one sharded training step against the single-worker reference.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        cluster: Option<PathBuf>,
        /// Worker count for an on-the-fly plan when neither plan nor cluster is given.
        #[arg(long)]
        workers: Option<usize>,
        /// sgd, rowwise_adagrad or adagrad.
        #[arg(long, default_value = "rowwise_adagrad")]
        optimizer: String,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 1e-8)]
        eps: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Replay a row-id trace through a set-associative cache.
    Cache {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        sets: usize,
        #[arg(long, default_value_t = 32)]
        ways: usize,
        #[arg(long, value_delimiter = ',', default_value = "lru")]
        policy: Vec<String>,
        /// With --dram-bw, also report the blended row bandwidth.
        #[arg(long)]
        hbm_bw: Option<f64>,
        #[arg(long)]
        dram_bw: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Memory and collective volume report for a plan.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        knobs: PlanKnobs,
        #[command(flatten)]
        perf: PerfKnobs,
        #[command(flatten)]
        common: Common,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NEOSIM_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| CliError::Input(format!("NEOSIM_THREADS={v:?} is not a count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("NEOSIM_THREADS: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Plan { model, cluster, knobs, common } => commands::plan(&model, &cluster, &knobs, &common),
        Command::Simulate { model, cluster, plan, knobs, perf, common } => {
            commands::simulate(&model, &cluster, plan.as_deref(), &knobs, &perf, &common)
        }
        Command::Sweep { model, cluster, nodes, knobs, perf, common } => {
            commands::sweep(&model, &cluster, &nodes, &knobs, &perf, &common)
        }
        Command::Verify { model, plan, cluster, workers, optimizer, lr, eps, common } => {
            commands::verify(&model, plan.as_deref(), cluster.as_deref(), workers, &optimizer, lr, eps, &common)
        }
        Command::Cache { trace, sets, ways, policy, hbm_bw, dram_bw, common } => {
            commands::cache(&trace, sets, ways, &policy, hbm_bw.zip(dram_bw), &common)
        }
        Command::Report { model, cluster, plan, knobs, perf, common } => {
            commands::report(&model, &cluster, plan.as_deref(), &knobs, &perf, &common)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors are input errors; clap's own code 2 means infeasible here.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("neosim: {e}");
            ExitCode::from(e.code())
        }
    }
}
