//! Trains one preset with TOML overrides and prints each evaluation.
//!
//! cargo run --release --example preset_run -- state 0 'mode = "state_flare"' 'frames = 4'

use flare::harness::{discrete_preset, pixel_preset, run_training_with, state_preset, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base = match args.first().map(String::as_str) {
        Some("pixel") => pixel_preset(),
        Some("discrete") => discrete_preset(),
        _ => state_preset(),
    };
    let seed: u64 = args.get(1).map_or(Ok(0), |s| s.parse())?;
    let mut table: toml::Table = toml::from_str(&base.to_toml_string()?)?;
    for line in args.iter().skip(2) {
        table.extend(toml::from_str::<toml::Table>(line)?);
    }
    let cfg = RunConfig::from_toml_str(&toml::to_string(&table)?)?;
    let start = std::time::Instant::now();
    run_training_with(&cfg, seed, |r| {
        println!(
            "{:>7} eval {:>7.2} ± {:>6.2}  ep {:>7.2} critic {:.4} actor {:.3} alpha {:.4}  {:.0}s",
            r.env_step,
            r.eval_return_mean,
            r.eval_return_std,
            r.episode_return.unwrap_or(f64::NAN),
            r.critic_loss.unwrap_or(f64::NAN),
            r.actor_loss.unwrap_or(f64::NAN),
            r.alpha.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    })?;
    Ok(())
}
