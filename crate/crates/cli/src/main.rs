use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geo_core::harness::report::{results_root, ExperimentOutcome};
use geo_core::harness::{run_experiment, selftest, sweep, table, ExperimentConfig};
use geo_core::Error;

/// Benchmark harness for generative evolutionary optimization and its
/// baselines.
#[derive(Parser)]
#[command(name = "geo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output root; overrides GEO_RESULTS_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config once per value of one key.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate every summary.csv under a directory into mean ± std grids.
    Table { dir: PathBuf },
    /// Run the built-in invariant checks.
    Selftest,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn report(outcome: &ExperimentOutcome) -> Result<(), Failure> {
    println!("{}", outcome.dir.display());
    for row in &outcome.summary {
        println!(
            "  {} {} d={} {}: {} ± {} over {} runs",
            row.algorithm, row.problem, row.dim, row.metric, row.mean, row.std, row.repeats
        );
    }
    for (seed, msg) in &outcome.failures {
        eprintln!("  seed {seed} failed: {msg}");
    }
    if outcome.flagged() {
        return Err(Failure::Runtime(format!(
            "{} of the runs in {} failed",
            outcome.failures.len(),
            outcome.dir.display()
        )));
    }
    Ok(())
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let outcome = run_experiment(&cfg, &out.unwrap_or_else(results_root))?;
            report(&outcome)
        }
        Command::Sweep {
            config,
            key,
            values,
            out,
        } => {
            let cfg = load(&config)?;
            for v in &values {
                let mut probe = cfg.clone();
                probe.set(&key, v)?;
                probe.validate()?;
            }
            let outcomes = sweep(&cfg, &key, &values, &out.unwrap_or_else(results_root))?;
            let mut result = Ok(());
            for o in &outcomes {
                if let Err(e) = report(o) {
                    result = Err(e);
                }
            }
            result
        }
        Command::Table { dir } => {
            print!("{}", table(&dir)?);
            Ok(())
        }
        Command::Selftest => {
            let checks = selftest();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} self checks failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage_error { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
