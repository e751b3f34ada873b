use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedq::harness::{emit_plot_data, run_experiment, ExperimentConfig};
use fedq::mdp::generate_random_mdp;
use fedq::Result;

#[derive(Parser)]
#[command(name = "fedq", about = "Federated optimistic Q-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random environment and save it as JSON.
    GenEnv {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        states: usize,
        #[arg(long)]
        actions: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every seed of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value`, applied after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Turn run directories into percentile curves.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration with every key documented.
    PrintConfig,
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenEnv {
            seed,
            states,
            actions,
            horizon,
            out,
        } => {
            generate_random_mdp(seed, states, actions, horizon)?.save_json(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Run { config, overrides } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg = ExperimentConfig::from_text(&text)?;
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            for s in run_experiment(&cfg)? {
                println!(
                    "{} seed {}: rounds {} regret {:.3} scalars {} ({:.2}s)",
                    s.algorithm, s.seed, s.rounds, s.final_regret, s.total_scalars, s.wall_time_secs
                );
            }
        }
        Command::Report { runs, out } => {
            for path in emit_plot_data(&runs, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::PrintConfig => {
            let mut out = std::io::stdout().lock();
            for (key, help) in fedq::harness::config::CONFIG_KEYS {
                writeln!(out, "# {key}: {help}")?;
            }
            write!(out, "{}", ExperimentConfig::default().to_text())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
