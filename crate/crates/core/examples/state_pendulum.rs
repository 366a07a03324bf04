//! Full-state, position-only and latent-flow SAC on the swing-up pendulum.
//!
//! cargo run --release --example state_pendulum -- 40000

use flare::harness::{run_training, state_preset, RunConfig};
use flare::representation::RepresentationMode as M;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map_or(Ok(40_000), |s| s.parse())?;
    for (mode, frames) in [
        (M::StateFull, 1),
        (M::StatePositionOnly, 1),
        (M::StateFlare, 4),
    ] {
        let cfg = RunConfig {
            name: mode.name().into(),
            mode,
            frames,
            total_steps: steps,
            eval_interval: steps / 4,
            ..state_preset()
        };
        let out = run_training(&cfg, 0)?;
        let curve: Vec<String> = out
            .log
            .eval_means()
            .iter()
            .map(|v| format!("{v:.1}"))
            .collect();
        println!("{:<20} {}", mode.name(), curve.join(" "));
    }
    Ok(())
}
