use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ztspin::harness::{self, ExperimentConfig};
use ztspin::{Error, Result};

#[derive(Parser)]
#[command(name = "ztspin", version, about = "Zero-temperature spin dynamics with quenched disorder")]
struct Cli {
    /// Override the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every replicate and write trajectories, traces and the report.
    Simulate { config: PathBuf },
    /// Bond weights, clusters and cluster-tail estimates.
    Percolation { config: PathBuf },
    /// Run replicates with the per-flip Lyapunov audit switched on.
    LyapunovAudit { config: PathBuf },
    /// Print the flip-type label from the doubling-window heuristic.
    Classify { config: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config } => {
            let cfg = load(&config, cli.seed)?;
            let report = harness::run_experiment(&cfg)?;
            let a = &report.aggregate;
            println!("replicates: {}", a.replicates);
            println!("absorbed fraction: {}", a.absorbed_fraction);
            println!("mean events: {}", a.mean_events);
            println!("energy counting bound holds: {}", a.energy_counting_ok);
            if let Some(v) = a.audit_violations {
                println!("audit violations: {v}");
            }
        }
        Command::Percolation { config } => {
            let cfg = load(&config, cli.seed)?;
            let report = harness::run_percolation(&cfg)?;
            for row in &report.rows {
                println!(
                    "replicate {}: K = {}, {} clusters, largest {}{}",
                    row.replicate,
                    row.k,
                    row.clusters,
                    row.largest_cluster,
                    if row.spans_side { " (spans a side)" } else { "" }
                );
            }
            if let Some(tail) = &report.tail {
                println!("threshold (2d+1) ln|S0| = {}", tail.alpha);
                for est in &tail.estimates {
                    match est.fit {
                        Some(fit) => println!("K = {}: lambda = {} over {} points", est.k, fit.lambda, fit.points),
                        None => println!("K = {}: no fit", est.k),
                    }
                }
            }
            for m in &report.exp_moment {
                let verdict = if m.report.stable { "stable" } else { "unstable" };
                println!("K = {}: ln E exp(alpha |C0|) = {} ({verdict})", m.k, m.report.log_mean);
            }
        }
        Command::LyapunovAudit { config } => {
            let mut cfg = load(&config, cli.seed)?;
            cfg.audit = true;
            let report = harness::run_experiment(&cfg)?;
            for row in &report.rows {
                println!(
                    "replicate {}: K = {}, {} events ({} linear, {} capped), L {} -> {}, violations {}",
                    row.replicate,
                    row.k.unwrap_or_default(),
                    row.events,
                    row.linear_events.unwrap_or_default(),
                    row.capped_events.unwrap_or_default(),
                    row.l_initial.unwrap_or_default(),
                    row.l_final.unwrap_or_default(),
                    row.audit_violations.unwrap_or_default()
                );
            }
        }
        Command::Classify { config } => {
            let cfg = load(&config, cli.seed)?;
            let report = harness::run_experiment(&cfg)?;
            let c = &report.aggregate.classification;
            println!("{}", c.label);
            let fr: Vec<String> = c.fractions.iter().map(|f| f.to_string()).collect();
            println!("window fractions (newest first): {}", fr.join(", "));
            println!("span fraction: {}", c.span);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if Error::is_refusal(&e) { 2 } else { 1 })
        }
    }
}
