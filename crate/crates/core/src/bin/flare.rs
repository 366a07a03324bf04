use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flare::harness::{
    evaluate, group_by_variant, output_root, plot_curves, run_suite, train_and_save, Agent,
    HarnessError, RunConfig, Streams, SuiteId, OUTPUT_ENV,
};
use flare::nn::Checkpoint;

#[derive(Parser)]
#[command(name = "flare", about = "Train, evaluate and plot latent-flow agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every variant and seed of a preset suite.
    Suite {
        #[arg(long)]
        name: SuiteId,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Plot learning curves from log files, grouped by variant directory.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved checkpoint greedily.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let root = output_root();
    match cli.command {
        Command::Train { config, seed } => {
            let cfg = RunConfig::load(&config)?;
            let out = train_and_save(&cfg, seed, &root, |r| {
                println!(
                    "step {:>8}  eval {:>8.2} ± {:.2}",
                    r.env_step, r.eval_return_mean, r.eval_return_std
                )
            })?;
            println!(
                "{} env steps; outputs under {} (set {OUTPUT_ENV} to change)",
                out.env_steps,
                root.display()
            );
        }
        Command::Suite { name, seeds } => {
            let result = run_suite(name, &seeds, &root, |m| println!("{m}"))?;
            print!("{}", result.verdicts_text());
        }
        Command::Plot { inputs, out } => {
            let mut paths = Vec::new();
            for pattern in &inputs {
                let matches =
                    glob::glob(pattern).map_err(|e| HarnessError::Config(e.to_string()))?;
                for p in matches {
                    paths.push(p.map_err(|e| HarnessError::Io(e.into()))?);
                }
            }
            paths.sort();
            if paths.is_empty() {
                return Err(HarnessError::Config("no log files matched".into()));
            }
            plot_curves(&group_by_variant(&paths)?, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let (cfg, agent) = Agent::from_checkpoint(&ck)?;
            let res = evaluate(&agent, &cfg, episodes, &mut Streams::new(seed).eval)?;
            println!(
                "{}: {:.3} ± {:.3} over {episodes} episodes",
                cfg.name, res.mean, res.std
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
