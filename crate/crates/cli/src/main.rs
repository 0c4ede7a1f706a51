//! Command-line runner for rotation experiments and the verification suites.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rotlab::experiment::{config_schema, plan, run_experiment, thread_limit_from_env, ExperimentConfig};
use rotlab::verify::{run_suite, Suite};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rotlab", version, about = "Rotation sensitivity experiments for adaptive optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate the config and print the plan without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run the built-in acceptance checks.
    Verify {
        #[arg(value_parser = ["fast", "full"])]
        suite: String,
    },
    /// Print the JSON Schema for experiment configs.
    ExportSchema,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    if let Some(n) = thread_limit_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Run {
            config,
            out,
            dry_run,
        } => {
            let (cfg, bytes) = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if dry_run {
                let p = plan(&cfg, &bytes, out.as_deref())?;
                println!("{}", serde_json::to_string_pretty(&serde_json::json!({"config": cfg, "plan": p}))?);
                return Ok(ExitCode::SUCCESS);
            }
            let summary = run_experiment(&cfg, &bytes, out.as_deref())
                .with_context(|| format!("running {}", cfg.name))?;
            for c in &summary.checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.kind, c.detail);
            }
            println!(
                "{}: {} checks, {} passed",
                summary.name,
                summary.checks.len(),
                summary.checks.iter().filter(|c| c.passed).count()
            );
            Ok(ExitCode::from(summary.exit_code as u8))
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse()?;
            let outcomes = run_suite(suite, |o| println!("{}", o.line()));
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::ExportSchema => {
            println!("{}", serde_json::to_string_pretty(&config_schema())?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
