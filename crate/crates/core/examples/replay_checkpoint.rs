//! Replay windows across episode boundaries, a replay snapshot round trip
//! and a checkpoint that reloads into an agent for evaluation.

use std::sync::Arc;

use flare::harness::{
    evaluate, random_action, run_training, state_preset, Agent, RunConfig, Streams,
};
use flare::nn::Checkpoint;
use flare::replay::{ReplayBuffer, Transition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig {
        mode: flare::representation::RepresentationMode::StatePositionOnly,
        ..state_preset()
    };
    let mut env = cfg.env_config().build(cfg.mode.obs_mode());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut buffer = ReplayBuffer::new(500);
    for episode in 0..3u64 {
        let mut obs = Arc::new(env.reset(episode));
        loop {
            let action = random_action(env.action_space(), &mut rng);
            let step = env.step(&action);
            let next = Arc::new(step.observation);
            buffer.push(Transition {
                obs,
                action,
                reward: step.reward,
                next_obs: next.clone(),
                done: step.terminal,
                episode,
            });
            obs = next;
            if step.done {
                break;
            }
        }
    }
    let batch = buffer.sample(4, 3, &mut rng)?;
    for (i, w) in batch.indices.iter().zip(&batch.obs) {
        let angles: Vec<String> = w
            .iter()
            .map(|o| format!("{:+.3}", o.as_vector().unwrap()[1]))
            .collect();
        println!(
            "transition {i:>3}: sin(theta) window [{}]",
            angles.join(", ")
        );
    }

    let dir = tempfile::tempdir()?;
    let snap = dir.path().join("replay.bin");
    buffer.save(&snap)?;
    let back = ReplayBuffer::load(&snap)?;
    println!(
        "snapshot: {} transitions, {} bytes of observations",
        back.len(),
        back.observation_bytes()
    );

    let short = RunConfig {
        total_steps: 4_000,
        initial_steps: 1_000,
        eval_interval: 2_000,
        ..state_preset()
    };
    let out = run_training(&short, 0)?;
    let path = dir.path().join("checkpoint.json");
    out.agent
        .checkpoint(&short, 0, out.env_steps)?
        .save(&path)?;
    let (cfg, agent) = Agent::from_checkpoint(&Checkpoint::load(&path)?)?;
    let eval = evaluate(&agent, &cfg, 3, &mut Streams::new(0).eval)?;
    println!("reloaded agent: {:.1} ± {:.1}", eval.mean, eval.std);
    Ok(())
}
