//! Pixel SAC with latent flow on rendered pendulum frames, saved as a run
//! directory plus an SVG learning curve under `$FLARE_OUTPUT` (or `runs/`).
//!
//! cargo run --release --example pixel_pendulum -- 30000

use flare::harness::{output_root, pixel_preset, plot_curves, train_and_save, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map_or(Ok(30_000), |s| s.parse())?;
    let cfg = RunConfig {
        name: "example_pixel_flare".into(),
        total_steps: steps,
        eval_interval: steps / 6,
        eval_episodes: 5,
        ..pixel_preset()
    };
    let root = output_root();
    let out = train_and_save(&cfg, 0, &root, |r| {
        println!(
            "step {:>7}  eval {:>7.2} ± {:.2}",
            r.env_step, r.eval_return_mean, r.eval_return_std
        )
    })?;
    let svg = root.join(&cfg.name).join("curve.svg");
    plot_curves(&[(cfg.name.clone(), vec![out.log])], &svg)?;
    println!("wrote {}", svg.display());
    Ok(())
}
