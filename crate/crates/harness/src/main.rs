use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psi_core::algorithms::{Algo, StoppingKind};
use psi_core::calibration::CalibrationKind;
use psi_harness::experiment::run_experiment;
use psi_harness::reproduce::{gen_instance_file, reproduce, Experiment, ReproduceOptions};
use psi_harness::{ExperimentConfig, HarnessError, InstanceSource, Result};

#[derive(Parser)]
#[command(name = "psi", version, about = "Pareto set identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment configuration; flags override the config file.
    Run(RunArgs),
    /// Regenerate the data behind one of the reference experiments.
    Reproduce(ReproduceArgs),
    /// Instance file utilities.
    Instance {
        #[command(subcommand)]
        command: InstanceCommand,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin name (covboost, rotation, two-arm, correlation:<rho>, noc) or instance file.
    #[arg(long)]
    instance: Option<String>,
    #[arg(long, value_delimiter = ',')]
    delta: Option<Vec<f64>>,
    #[arg(long)]
    runs: Option<usize>,
    /// Comma-separated: psips, uniform, oracle, ape-style.
    #[arg(long, value_delimiter = ',')]
    algo: Option<Vec<Algo>>,
    #[arg(long)]
    stopping: Option<StoppingKind>,
    #[arg(long)]
    calibration: Option<CalibrationKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_rounds: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    noc_features: Option<PathBuf>,
    /// Record wall-clock milliseconds per run.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct ReproduceArgs {
    /// covboost, correlation, random-gaussian, random-bernoulli, noc, rejections, posterior-error
    name: Experiment,
    #[arg(long, default_value_t = 0.2)]
    scale: f64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    noc_features: Option<PathBuf>,
    #[arg(long)]
    timing: bool,
    /// Exit with status 3 when a reference threshold is missed.
    #[arg(long)]
    check: bool,
}

#[derive(Subcommand)]
enum InstanceCommand {
    /// Write a generated instance as JSON.
    Gen {
        /// rotation, gaussian or bernoulli
        #[arg(long)]
        spec: String,
        #[arg(long = "K", default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reject instances whose complexity exceeds this.
        #[arg(long)]
        cap: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.instance {
        cfg.instance = InstanceSource::parse(&s);
    }
    if let Some(v) = args.delta {
        cfg.deltas = v;
    }
    if let Some(v) = args.runs {
        cfg.runs = v;
    }
    if let Some(v) = args.algo {
        cfg.algos = v;
    }
    if let Some(v) = args.stopping {
        cfg.stopping = v;
    }
    if let Some(v) = args.calibration {
        cfg.calibration = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.xi {
        cfg.xi = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.max_rounds {
        cfg.max_rounds = v;
    }
    if let Some(v) = args.out {
        cfg.out = v;
    }
    if args.noc_features.is_some() {
        cfg.noc_features = args.noc_features;
    }
    cfg.timing |= args.timing;
    let summary = run_experiment(&cfg)?;
    for g in &summary.groups {
        println!(
            "{:<16} {:<10} delta={:<6} runs={:<5} mean_tau={:<12.1} error_rate={:.4} non_stopped={}",
            g.instance, g.algo, g.delta, g.runs, g.mean_tau, g.error_rate, g.non_stopped
        );
    }
    println!("records: {}", cfg.out.display());
    println!("summary: {}", cfg.summary_path().display());
    Ok(())
}

fn reproduce_cmd(args: ReproduceArgs) -> Result<()> {
    let opts = ReproduceOptions {
        scale: args.scale,
        out_dir: args.out_dir,
        seed: args.seed,
        delta: args.delta,
        noc_features: args.noc_features,
        timing: args.timing,
    };
    let outcome = reproduce(args.name, &opts)?;
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    for c in &outcome.checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = outcome.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if args.check && !failed.is_empty() {
        return Err(HarnessError::Check(failed.join(", ")));
    }
    Ok(())
}

fn instance_cmd(cmd: InstanceCommand) -> Result<()> {
    match cmd {
        InstanceCommand::Gen { spec, k, d, seed, cap, out } => {
            let inst = gen_instance_file(&spec, k, d, seed, cap, &out)?;
            println!(
                "wrote {} (K={}, d={}, Pareto set {})",
                out.display(),
                inst.n_arms(),
                inst.dim(),
                inst.pareto_set()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run_cmd(args),
        Command::Reproduce(args) => reproduce_cmd(args),
        Command::Instance { command } => instance_cmd(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psi: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
