use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cimsim::par;
use cimsim_cli::config::RunConfig;
use cimsim_cli::run::{self, Failure, Overrides, RunOptions};

/// Compute-in-memory neural network simulator.
#[derive(Parser, Debug)]
#[command(name = "cimsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: runs/<name>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Stratified training subset size.
    #[arg(long, global = true)]
    subset: Option<usize>,
    #[arg(long, global = true)]
    mnist_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    cifar_dir: Option<PathBuf>,
    /// Write 0 instead of wall time into metrics.csv.
    #[arg(long, global = true)]
    no_timing: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Cmd {
    /// Train from scratch.
    Train,
    /// Evaluate a saved model.
    Infer,
    /// Train or load, change the readout, retrain.
    Retrain,
    /// Repeat an experiment over values of one config key.
    Sweep,
    /// Check a config and report every problem.
    ValidateConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprint!("error: {f}");
            if !f.to_string().ends_with('\n') {
                eprintln!();
            }
            ExitCode::from(f.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let path = cli.config.as_ref().ok_or_else(|| {
        Failure::Config(cimsim::Error::Config(vec!["--config: required".into()]))
    })?;
    let mut cfg = RunConfig::load(path).map_err(Failure::Config)?;
    if cli.command == Cmd::ValidateConfig {
        println!("{}: ok", path.display());
        return Ok(());
    }
    Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        subset: cli.subset,
        mnist_dir: cli.mnist_dir.clone(),
        cifar_dir: cli.cifar_dir.clone(),
    }
    .apply(&mut cfg);
    let opts = RunOptions {
        no_timing: cli.no_timing,
    };
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    par::with_threads(jobs, || {
        let full = run::load_dataset(&cfg)?;
        log::info!(
            "{}: {} train / {} test samples from {}",
            cfg.name,
            full.0.len(),
            full.1.len(),
            run::dataset_dir(&cfg).display()
        );
        let summary = match cli.command {
            Cmd::Train => run::run_train(&cfg, &full, opts),
            Cmd::Infer => run::run_infer(&cfg, &full, opts),
            Cmd::Retrain => run::run_retrain(&cfg, &full, opts),
            Cmd::Sweep => run::run_sweep(&cfg, &full, opts),
            Cmd::ValidateConfig => unreachable!("handled above"),
        }?;
        match summary["final_test_acc"].as_f64() {
            Some(acc) => log::info!("done: final test accuracy {acc:.4}, artifacts in {}", run::output_dir(&cfg).display()),
            None => log::info!("done: artifacts in {}", run::output_dir(&cfg).display()),
        }
        Ok(())
    })
}
