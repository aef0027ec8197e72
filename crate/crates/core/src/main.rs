use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use patrolsim::experiment::{cmd_dynamic, cmd_export_heatmap, cmd_run, cmd_validate, Overrides};

#[derive(Parser)]
#[command(name = "patrolsim", version, about = "Multi-agent frequency-based patrolling with decentralized Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of independent learning runs and aggregate them.
    Run {
        /// Experiment file, or a bare world file.
        #[arg(long)]
        config: PathBuf,
        /// Base seed; run i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output root [env: PATROLSIM_OUT, default: results].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable inter-agent communication.
        #[arg(long)]
        no_comm: bool,
    },
    /// Continue a checkpointed run on an edited world.
    Dynamic {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mutations: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        steps: u64,
        /// Stop Q-updates during the replay.
        #[arg(long)]
        freeze: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a world file and print its requirement table.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the per-agent heat map nearest at or before a step as a matrix.
    ExportHeatmap {
        /// Run directory or its run.csv.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        step: u64,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            runs,
            steps,
            jobs,
            out,
            no_comm,
        } => {
            let overrides = Overrides {
                seed,
                runs,
                steps,
                out,
                no_comm,
            };
            let outcome = cmd_run(&config, &overrides, jobs)?;
            for s in &outcome.summaries {
                let final_i = s
                    .final_mean_insufficiency
                    .map_or("-".to_string(), |v| format!("{v:.3}"));
                let conv = s.convergence_step.map_or("-".to_string(), |v| v.to_string());
                println!("seed {}: final mean insufficiency {final_i}%, converged at {conv}", s.seed);
            }
            println!("wrote {}", outcome.dir.display());
        }
        Command::Dynamic {
            checkpoint,
            mutations,
            steps,
            freeze,
            out,
        } => {
            let dir = cmd_dynamic(&checkpoint, &mutations, steps, freeze, out.as_deref())?;
            println!("wrote {}", dir.display());
        }
        Command::Validate { config } => {
            cmd_validate(&config, io::stdout().lock())?;
        }
        Command::ExportHeatmap { run, step, out } => {
            let found = match out {
                Some(path) => cmd_export_heatmap(&run, step, std::fs::File::create(&path)?)?,
                None => cmd_export_heatmap(&run, step, io::stdout().lock())?,
            };
            eprintln!("snapshot at step {found}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
