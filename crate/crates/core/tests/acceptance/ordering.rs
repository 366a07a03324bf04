//! Ordering experiments over preset suites, and run reproducibility.

use std::path::PathBuf;

use crate::Miss;

use flare::harness::{
    pixel_preset, run_suite, state_preset, train_and_save, RunConfig, SuiteId, OUTPUT_ENV,
};
use flare::representation::RepresentationMode;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Suite outputs live under `$FLARE_OUTPUT`, or `runs/` at the workspace root.
/// Finished runs with identical configs are reused.
pub fn suite_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../runs")))
}

pub fn ordering(id: SuiteId) -> Result<String, Miss> {
    let result = run_suite(id, &SEEDS, &suite_root(), |m| eprintln!("  [{id}] {m}"))
        .map_err(|e| e.to_string())?;
    let detail = result
        .verdicts
        .iter()
        .map(|v| v.detail.clone())
        .collect::<Vec<_>>()
        .join("; ");
    if !result.complete() {
        return Err(Miss::Broken(format!(
            "incomplete: {}; {detail}",
            result.failures.join("; ")
        )));
    }
    if result.verdicts.iter().all(|v| v.passed) {
        Ok(detail)
    } else {
        Err(Miss::Measured(detail))
    }
}

fn short(cfg: RunConfig) -> RunConfig {
    RunConfig {
        total_steps: 1_200,
        initial_steps: 400,
        eval_interval: 400,
        eval_episodes: 2,
        replay_capacity: 2_000,
        sac_batch_size: 16,
        ..cfg
    }
}

/// The same (config, seed) run twice gives byte-identical CSV logs.
pub fn reproducibility() -> Result<String, Miss> {
    let configs = [
        short(RunConfig {
            name: "repro_state".into(),
            mode: RepresentationMode::StateFlare,
            frames: 4,
            ..state_preset()
        }),
        short(RunConfig {
            name: "repro_pixel".into(),
            ..pixel_preset()
        }),
    ];
    let mut sizes = Vec::new();
    for cfg in &configs {
        let mut logs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            train_and_save(cfg, 3, dir.path(), |_| {}).map_err(|e| e.to_string())?;
            let path = dir.path().join(&cfg.name).join("seed_3").join("log.csv");
            logs.push(std::fs::read(path).map_err(|e| e.to_string())?);
        }
        if logs[0] != logs[1] {
            return Err(Miss::Broken(format!("{}: logs differ", cfg.name)));
        }
        sizes.push(format!("{} {} bytes", cfg.name, logs[0].len()));
    }
    Ok(format!("identical logs: {}", sizes.join(", ")))
}
