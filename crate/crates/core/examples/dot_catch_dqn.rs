//! DQN on dot-catch: three-frame latent flow against a single frame.
//!
//! cargo run --release --example dot_catch_dqn -- 40000

use flare::harness::{discrete_preset, run_training, RunConfig};
use flare::representation::RepresentationMode as M;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map_or(Ok(40_000), |s| s.parse())?;
    for (mode, frames) in [(M::FlarePixel, 3), (M::FrameStackPixel, 1)] {
        let cfg = RunConfig {
            mode,
            frames,
            total_steps: steps,
            eval_interval: steps / 4,
            ..discrete_preset()
        };
        let out = run_training(&cfg, 0)?;
        let curve: Vec<String> = out
            .log
            .eval_means()
            .iter()
            .map(|v| format!("{v:.2}"))
            .collect();
        println!("{} n={frames}: catch rate {}", mode.name(), curve.join(" "));
    }
    Ok(())
}
