use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use osifl::config::{parse_config, ExperimentConfig, SEED_OVERRIDE_ENV};
use osifl::experiment::{run_to_dir, sweep, SweepAxis};
use osifl::selftest;

#[derive(Parser)]
#[command(name = "osifl", version, about = "One-shot incremental federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (method, seed) pair and write CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the experiment across values of one axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of p, clients_per_task, w.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance checks.
    Selftest {
        #[arg(long, default_value = "selftest_out")]
        out: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let env = std::env::var(SEED_OVERRIDE_ENV).ok();
    cfg.apply_seed_override(env.as_deref()).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(command: Command) -> Result<bool, String> {
    match command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let paths = run_to_dir(&cfg, &dir).map_err(|e| e.to_string())?;
            for p in paths {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let cfg = load(&config)?;
            let axis: SweepAxis = axis.parse().map_err(|e: osifl::Error| e.to_string())?;
            let result = sweep(&cfg, axis, &values).map_err(|e| e.to_string())?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            let path = dir.join(format!("sweep_{}.csv", axis.as_str()));
            std::fs::write(&path, result.to_csv()).map_err(|e| e.to_string())?;
            println!("{}", path.display());
            Ok(true)
        }
        Command::Selftest { out } => {
            let mut outcomes = Vec::new();
            for id in 1..=selftest::CHECK_COUNT {
                let o = selftest::run_check(id).expect("known check");
                println!("{}", o.line());
                outcomes.push(o);
            }
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let path = out.join("selftest.csv");
            std::fs::write(&path, selftest::outcomes_csv(&outcomes)).map_err(|e| e.to_string())?;
            let passed = outcomes.iter().filter(|o| o.passed).count();
            println!("{passed}/{} passed; wrote {}", outcomes.len(), path.display());
            Ok(passed == outcomes.len())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
