//! Command-line front end: run experiments, verify chain dumps, and
//! summarize metrics files.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bcfl_core::harness::{emit_metrics, from_jsonl, run_experiment, ExperimentConfig, MetricsRow};
use bcfl_core::ledger::Chain;

#[derive(Parser)]
#[command(name = "bcfl", about = "Deterministic blockchain-federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config and write metrics artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics.jsonl, summary.csv, chain.hex,
        /// and audit.jsonl.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Recompute every hash link in a chain dump.
    VerifyChain {
        #[arg(long)]
        chain: PathBuf,
    },
    /// Summarize a metrics.jsonl file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error:\n{msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

enum CliError {
    Config(String),
    Runtime(String),
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out } => run(config, seed, out),
        Command::VerifyChain { chain } => verify_chain(chain),
        Command::Report { metrics } => report(metrics),
    }
}

fn run(config: PathBuf, seed: Option<u64>, out: PathBuf) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config.display())))?;
    let mut cfg =
        ExperimentConfig::from_toml(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = seed {
        cfg.experiment.seed = seed;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let artifacts = run_experiment(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let paths = emit_metrics(
        &artifacts.rows,
        &artifacts.chain.dump_hex(),
        &artifacts.audit.export_jsonl(),
        &out,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let committed = artifacts.rows.iter().filter(|r| r.committed).count();
    println!(
        "completed {} rounds ({committed} committed), chain height {}, final root {}",
        artifacts.rows.len(),
        artifacts.chain.len(),
        artifacts.final_root
    );
    if let Some(score) = artifacts.rows.iter().rev().find_map(|r| r.global_score) {
        println!("final validation score: {score:.4}");
    }
    for path in paths {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn verify_chain(path: PathBuf) -> Result<(), CliError> {
    let dump = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let chain = Chain::load_hex(&dump).map_err(|e| CliError::Runtime(e.to_string()))?;
    if chain.verify() {
        println!("chain OK: {} blocks, tip {}", chain.len(), chain.tip_hash());
        Ok(())
    } else {
        Err(CliError::Runtime("chain verification FAILED".into()))
    }
}

fn report(path: PathBuf) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let rows: Vec<MetricsRow> =
        from_jsonl(&text).map_err(|e| CliError::Runtime(format!("bad metrics file: {e}")))?;
    let mut out = String::new();
    if rows.is_empty() {
        out.push_str("no rounds recorded\n");
    } else {
        out.push_str("round  committed  score    messages  duration_ms  participants\n");
        for row in &rows {
            out.push_str(&format!(
                "{:>5}  {:>9}  {:>7}  {:>8}  {:>11}  {}\n",
                row.round,
                row.committed,
                row.global_score
                    .map(|s| format!("{s:.4}"))
                    .unwrap_or_else(|| "-".into()),
                row.messages_total(),
                row.duration_ms,
                row.participants.len()
            ));
        }
        let committed = rows.iter().filter(|r| r.committed).count();
        let total_msgs: u64 = rows.iter().map(|r| r.messages_total()).sum();
        out.push_str(&format!(
            "\n{} rounds, {committed} committed, {total_msgs} messages total\n",
        rows.len()
        ));
    }
    // Tolerate a consumer that closes the pipe early (e.g. `| head`).
    use std::io::Write;
    let _ = std::io::stdout().write_all(out.as_bytes());
    Ok(())
}
