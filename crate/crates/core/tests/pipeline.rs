//! End-to-end runs through the harness and the command-line binary.

use std::process::Command;

use flare::harness::{
    discrete_preset, evaluate, pixel_preset, run_training, state_preset, Agent, RunConfig, RunLog,
    Streams,
};
use flare::nn::Checkpoint;
use flare::representation::RepresentationMode;

fn tiny(cfg: RunConfig) -> RunConfig {
    RunConfig {
        total_steps: 800,
        initial_steps: 400,
        eval_interval: 400,
        eval_episodes: 2,
        replay_capacity: 1_000,
        sac_batch_size: 32,
        dqn_batch_size: 32,
        ..cfg
    }
}

#[test]
fn warm_up_rows_carry_no_losses() {
    let cfg = RunConfig {
        eval_interval: 200,
        ..tiny(state_preset())
    };
    let out = run_training(&cfg, 0).unwrap();
    assert_eq!(out.log.steps(), vec![0, 200, 400, 600, 800]);
    for r in &out.log.records {
        assert_eq!(
            r.critic_loss.is_some(),
            r.env_step >= cfg.initial_steps,
            "{r:?}"
        );
        assert_eq!(
            r.actor_loss.is_some(),
            r.env_step >= cfg.initial_steps,
            "{r:?}"
        );
    }
}

#[test]
fn every_mode_trains_briefly() {
    use RepresentationMode as M;
    let state = [
        (M::StateFull, 1),
        (M::StatePositionOnly, 1),
        (M::StateStack, 3),
        (M::StateRecurrent, 3),
        (M::StateFlare, 4),
    ];
    let pixel = [
        (M::FlarePixel, 2),
        (M::FrameStackPixel, 2),
        (M::LatentConcatPixel, 3),
        (M::PixelFlow, 2),
    ];
    let configs = state
        .iter()
        .map(|&(mode, frames)| RunConfig {
            mode,
            frames,
            ..tiny(state_preset())
        })
        .chain(pixel.iter().map(|&(mode, frames)| RunConfig {
            mode,
            frames,
            sac_batch_size: 8,
            ..tiny(pixel_preset())
        }))
        .chain([RunConfig {
            ..tiny(discrete_preset())
        }]);
    for cfg in configs {
        let out = run_training(&cfg, 1).unwrap_or_else(|e| panic!("{}: {e}", cfg.mode.name()));
        let last = out.log.records.last().unwrap();
        assert_eq!(last.env_step, cfg.total_steps, "{}", cfg.mode.name());
        assert!(
            last.critic_loss.is_some_and(f64::is_finite),
            "{}",
            cfg.mode.name()
        );
    }
}

#[test]
fn reloaded_checkpoint_evaluates_identically() {
    for cfg in [
        tiny(state_preset()),
        RunConfig {
            sac_batch_size: 8,
            ..tiny(pixel_preset())
        },
    ] {
        let out = run_training(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        out.agent
            .checkpoint(&cfg, 2, out.env_steps)
            .unwrap()
            .save(&path)
            .unwrap();
        let (loaded_cfg, loaded) =
            Agent::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        let a = evaluate(&out.agent, &cfg, 2, &mut Streams::new(9).eval).unwrap();
        let b = evaluate(&loaded, &cfg, 2, &mut Streams::new(9).eval).unwrap();
        assert_eq!(a.returns, b.returns);
    }
}

#[test]
fn evaluation_is_deterministic_and_within_bounds() {
    let cfg = tiny(state_preset());
    let out = run_training(&cfg, 3).unwrap();
    let a = evaluate(&out.agent, &cfg, 3, &mut Streams::new(4).eval).unwrap();
    let b = evaluate(&out.agent, &cfg, 3, &mut Streams::new(4).eval).unwrap();
    assert_eq!(a.returns, b.returns);
    let max = (cfg.pendulum_horizon / cfg.action_repeat * cfg.action_repeat) as f64;
    assert!(a.returns.iter().all(|&r| (0.0..=max).contains(&r)));
}

#[test]
fn cli_trains_plots_and_evaluates() {
    let bin = env!("CARGO_BIN_EXE_flare");
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.toml");
    std::fs::write(&base, tiny(state_preset()).to_toml_string().unwrap()).unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "include = [\"base.toml\"]\nname = \"cli_run\"\n").unwrap();

    let status = |args: &[&str]| {
        let out = Command::new(bin)
            .args(args)
            .env("FLARE_OUTPUT", dir.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    status(&["train", "--config", config.to_str().unwrap(), "--seed", "5"]);
    let run = dir.path().join("cli_run").join("seed_5");
    let log = RunLog::load(&run.join("log.csv")).unwrap();
    assert_eq!(log.steps().last(), Some(&800));
    let saved = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(
        saved,
        RunConfig {
            name: "cli_run".into(),
            ..tiny(state_preset())
        }
    );

    let svg = dir.path().join("curves.svg");
    let pattern = format!("{}/*/seed_*/log.csv", dir.path().display());
    status(&["plot", "--inputs", &pattern, "--out", svg.to_str().unwrap()]);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("cli_run"));

    let report = status(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--episodes",
        "2",
    ]);
    assert!(!report.is_empty());

    let bad = Command::new(bin)
        .args(["suite", "--name", "nope"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
