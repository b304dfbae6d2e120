use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperagent_runner::certify::{certify, require_pass, Suite};
use hyperagent_runner::config::{ExperimentConfig, Overrides};
use hyperagent_runner::experiment::{run_experiment, RunOptions};
use hyperagent_runner::plot::replot;
use hyperagent_runner::RunnerError;

#[derive(Debug, Parser)]
#[command(name = "hyperagent", version, about = "HyperAgent bandit simulator and certifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured agent at every seed and write CSVs, manifest and plots.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        n_seeds: Option<usize>,
        #[arg(long)]
        no_plot: bool,
        /// Skip (agent, seed) runs already recorded in the output manifest.
        #[arg(long)]
        resume: bool,
    },
    /// Monte-Carlo certification of distribution constants or the good event.
    Certify {
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Redraw figures from the CSVs of a finished run.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), RunnerError> {
    match cli.command {
        Command::Run { config, jobs, out, seed, horizon, n_seeds, no_plot, resume } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply(&Overrides {
                master_seed: seed,
                out_dir: out,
                horizon,
                n_seeds,
                plot: no_plot.then_some(false),
            });
            if jobs == Some(0) {
                return Err(RunnerError::Config("--jobs must be at least 1".into()));
            }
            let summary = run_experiment(&cfg, &RunOptions { jobs, resume })?;
            println!(
                "{} run(s) executed, {} reused; results in {}",
                summary.executed,
                summary.reused,
                summary.out_dir.display()
            );
            for (agent, rows) in &summary.aggregates {
                if let Some(last) = rows.last() {
                    println!("{agent}: final cumulative regret {:.3} ± {:.3}", last.mean_cum, last.se);
                }
            }
            for m in &summary.moderation {
                println!(
                    "{}: accuracy {:.3} ± {:.3}, published {:.3}",
                    m.agent, m.decision_accuracy, m.decision_accuracy_se, m.publish_fraction
                );
            }
            Ok(())
        }
        Command::Certify { suite, out, seed } => {
            let rows = certify(suite, &out, seed)?;
            for r in &rows {
                println!(
                    "{} {} [{}] empirical {:.6} bound {:.6}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.check_name,
                    r.params,
                    r.empirical,
                    r.bound
                );
            }
            require_pass(&rows)
        }
        Command::Plot { input, out } => {
            for p in replot(&input, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
