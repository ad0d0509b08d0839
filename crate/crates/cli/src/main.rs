use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "caccsim", version, about = "Mixed human/CACC freeway simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its logs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the report of a finished run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run every strategy x MPR x seed combination of a sweep file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// K-S test of the hard-brake samples of two analyzed runs.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Where to write the result.
        #[arg(long, default_value = "compare.json")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Simulate { config, out } => {
            let s = caccsim_cli::cmd_simulate(&config, &out)?;
            println!("{} vehicles admitted, {} exited, {} still queued", s.admitted, s.exited, s.queued);
        }
        Command::Analyze { run } => {
            let r = caccsim_cli::cmd_analyze(&run)?;
            println!(
                "Q {:.3} mi/h, throughput {:.1} vph, {} hard-brake samples, {:.3} lane changes per HV",
                r.q_mph, r.throughput_vph, r.hard_brake_counts.total, r.avg_lane_change_per_hv
            );
        }
        Command::Sweep { config, out, parallel } => {
            let outcome = caccsim_cli::cmd_sweep(&config, &out, parallel)?;
            let failed = outcome.failures();
            println!("{} runs, {} failed", outcome.outcomes.len(), failed);
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Compare { a, b, alpha, out } => {
            let c = caccsim_cli::cmd_compare(&a, &b, alpha, &out)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CACCSIM_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
