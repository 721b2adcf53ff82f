use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedlora_dp::config::{Mode, RunConfig, SEED_ENV};
use fedlora_dp::runner::{execute, exit_code, EXIT_VALIDATION};

/// Differentially-private federated LoRA simulator.
#[derive(Debug, Parser)]
#[command(name = "fedlora-dp", version)]
struct Cli {
    /// run, verify, sweep_epsilon, sweep_clip, sweep_rank, sweep_size, mia or report
    mode: String,
    /// `key = value` config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed and FEDLORA_DP_SEED
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output_dir
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(cli: &Cli) -> fedlora_dp::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.mode = cli.mode.parse::<Mode>()?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.apply_seed_overrides(env.as_deref(), cli.seed)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let cfg = match load(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    };
    match execute(&cfg) {
        Ok(summary) => {
            for line in &summary.lines {
                println!("{line}");
            }
            println!("run directory: {}", summary.run_dir.display());
            if let Some(checks) = &summary.checks {
                for (name, _) in checks.iter().filter(|(_, ok)| !ok) {
                    eprintln!("verify check failed: {name}");
                }
            }
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
