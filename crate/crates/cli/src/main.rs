use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use switchguard::bounds::fmt_num;
use switchguard_cli::commands::{self, Experiment, Status};
use switchguard_cli::config::{self, ExperimentConfig, Scale};
use switchguard_cli::output::OutputOptions;

#[derive(Parser)]
#[command(
    name = "switchguard",
    version,
    about = "Certified switching between a learned and a fallback gain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). Without it the built-in surrogate defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte-Carlo scale: desk = 10⁴ × 10³, paper = 10⁵ × 10³.
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,
    /// Worker threads for Monte-Carlo runs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Omit the `# generated_at=` line from output files.
    #[arg(long, global = true)]
    no_timestamp: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Evaluate every certificate and bound.
    Certify,
    /// Simulate one switched trajectory and its unguarded counterpart.
    Simulate,
    /// Monte-Carlo sweep over the threshold grid.
    Sweep,
    /// Check the bounds against Monte-Carlo estimates; exits nonzero on failure.
    Verify,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => config::load_config(p)?,
        None => config::load_config_str("", &std::env::current_dir()?)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = std::path::absolute(o)?;
    }
    if let Some(s) = cli.scale {
        cfg.apply_scale(s);
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load(cli)?;
    let out = OutputOptions::new(cfg.output.dir.clone(), !cli.no_timestamp);
    out.write("config.resolved.toml", &cfg.to_toml()?)?;
    let exp = Experiment::prepare(&cfg)?;
    match cli.command {
        Command::Certify => {
            let reports = commands::cmd_certify(&exp, &out)?;
            print!("{}", exp.report(cfg.controller.threshold)?.to_key_value());
            if reports.len() > 1 {
                println!(
                    "# {} grid rows in {}",
                    reports.len(),
                    out.path("report.csv").display()
                );
            }
        }
        Command::Simulate => {
            let s = commands::cmd_simulate(&exp, &out)?;
            for (k, v) in s.entries() {
                println!("{k} = {v}");
            }
        }
        Command::Sweep => {
            let rows = commands::cmd_sweep(&exp, &out)?;
            println!("{}", commands::SWEEP_HEADER[..].join(","));
            for r in &rows {
                println!("{}", r.csv_fields().join(","));
            }
        }
        Command::Verify => {
            let checks = commands::cmd_verify(&exp, &out)?;
            for c in &checks {
                println!(
                    "{:<5} {:<22} measured={} certified={} tolerance={}",
                    c.status.as_str().to_uppercase(),
                    c.name,
                    fmt_num(c.measured),
                    fmt_num(c.certified),
                    fmt_num(c.tolerance)
                );
            }
            return Ok(checks.iter().all(|c| c.status != Status::Fail));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
