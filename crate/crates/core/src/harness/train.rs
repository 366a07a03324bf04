//! Seeded training loop, evaluation and checkpoint round trips.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Learner, RunConfig};
use super::log::{LogRecord, RunLog};
use super::HarnessError;
use crate::dqn::Dqn;
use crate::envs::{Action, ActionSpace, Environment, Observation};
use crate::nn::{Checkpoint, ParamSet};
use crate::replay::{ReplayBuffer, Transition, Window};
use crate::representation::Representation;
use crate::sac::{Sac, SacError};

/// Evaluation episodes draw seeds with this bit set, training episodes
/// without it, so the two sets never overlap.
pub const EVAL_SEED_BIT: u64 = 1 << 63;

/// Independent random streams derived from one master seed.
pub struct Streams {
    pub init: ChaCha8Rng,
    pub train: ChaCha8Rng,
    pub eval: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub env: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: stream(0),
            train: stream(1),
            eval: stream(2),
            augment: stream(3),
            env: stream(4),
        }
    }
}

/// A learner of either kind, trained in `f32`.
#[derive(Clone, Debug)]
pub enum Agent {
    Sac(Box<Sac<f32>>),
    Dqn(Box<Dqn<f32>>),
}

impl Agent {
    pub fn build<R: Rng + ?Sized>(
        cfg: &RunConfig,
        action_space: ActionSpace,
        rng: &mut R,
    ) -> Result<Self, HarnessError> {
        let repr =
            Representation::new(cfg.mode, cfg.frames, cfg.input_shape(), &cfg.encoder_spec())?;
        Ok(match (cfg.learner, action_space) {
            (Learner::Sac, ActionSpace::Continuous { dim }) => Agent::Sac(Box::new(Sac::new(
                repr,
                dim,
                cfg.sac_hyper(),
                cfg.translate_spec()?,
                rng,
            )?)),
            (Learner::Dqn, ActionSpace::Discrete { n }) => {
                Agent::Dqn(Box::new(Dqn::new(repr, n, cfg.dqn_hyper(), rng)?))
            }
            (learner, space) => {
                return Err(HarnessError::Config(format!(
                    "{learner:?} cannot act in {space:?}"
                )));
            }
        })
    }

    pub fn window(&self) -> usize {
        match self {
            Agent::Sac(s) => s.window(),
            Agent::Dqn(d) => d.repr.window(),
        }
    }

    /// Evaluation action: the squashed policy mean or the greedy action.
    pub fn greedy(&self, window: &Window, rng: &mut ChaCha8Rng) -> Result<Action, HarnessError> {
        Ok(match self {
            Agent::Sac(s) => Action::Continuous(s.act(window, true, rng)?),
            Agent::Dqn(d) => Action::Discrete(d.act(window, 0.0, rng)?),
        })
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Agent::Sac(s) => {
                s.nets.encoder.num_values() + s.nets.actor.num_values() + s.nets.critic.num_values()
            }
            Agent::Dqn(d) => d.nets.encoder.num_values() + d.nets.q.num_values(),
        }
    }

    pub fn checkpoint(
        &self,
        cfg: &RunConfig,
        seed: u64,
        env_step: u64,
    ) -> Result<Checkpoint<f32>, HarnessError> {
        let mut ck = Checkpoint::new();
        ck.meta.insert("config".into(), cfg.to_toml_string()?);
        ck.meta.insert("seed".into(), seed.to_string());
        ck.meta.insert("env_step".into(), env_step.to_string());
        match self {
            Agent::Sac(s) => {
                ck.meta.insert("updates".into(), s.updates.to_string());
                let n = &s.nets;
                let o = &s.optim;
                ck.add_group("encoder", n.encoder.clone(), Some(o.encoder.clone()));
                ck.add_group("actor", n.actor.clone(), Some(o.actor.clone()));
                ck.add_group("critic", n.critic.clone(), Some(o.critic.clone()));
                ck.add_group("log_alpha", n.log_alpha.clone(), Some(o.alpha.clone()));
                ck.add_group("target_encoder", n.target_encoder.clone(), None);
                ck.add_group("target_critic", n.target_critic.clone(), None);
            }
            Agent::Dqn(d) => {
                ck.meta.insert("updates".into(), d.updates.to_string());
                ck.add_group(
                    "encoder",
                    d.nets.encoder.clone(),
                    Some(d.encoder_optim.clone()),
                );
                ck.add_group("q", d.nets.q.clone(), Some(d.q_optim.clone()));
                ck.add_group("target_encoder", d.nets.target_encoder.clone(), None);
                ck.add_group("target_q", d.nets.target_q.clone(), None);
            }
        }
        Ok(ck)
    }

    /// Rebuilds the configuration and agent stored in a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<(RunConfig, Self), HarnessError> {
        let text = ck.meta.get("config").ok_or_else(|| {
            HarnessError::Config("checkpoint carries no run configuration".into())
        })?;
        let cfg = RunConfig::from_toml_str(text)?;
        let space = cfg.env_config().build(cfg.mode.obs_mode()).action_space();
        let mut agent = Self::build(&cfg, space, &mut ChaCha8Rng::seed_from_u64(0))?;
        let updates = ck
            .meta
            .get("updates")
            .and_then(|u| u.parse().ok())
            .unwrap_or(0);
        fn load(
            dst: &mut ParamSet<f32>,
            ck: &Checkpoint<f32>,
            name: &str,
        ) -> Result<(), HarnessError> {
            let group = ck.group(name)?;
            dst.check_same_layout(&group.params)?;
            *dst = group.params.clone();
            Ok(())
        }
        fn optim<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(o) = src {
                *dst = o.clone();
            }
        }
        match &mut agent {
            Agent::Sac(s) => {
                let n = &mut s.nets;
                load(&mut n.encoder, ck, "encoder")?;
                load(&mut n.actor, ck, "actor")?;
                load(&mut n.critic, ck, "critic")?;
                load(&mut n.log_alpha, ck, "log_alpha")?;
                load(&mut n.target_encoder, ck, "target_encoder")?;
                load(&mut n.target_critic, ck, "target_critic")?;
                optim(&mut s.optim.encoder, &ck.group("encoder")?.optim);
                optim(&mut s.optim.actor, &ck.group("actor")?.optim);
                optim(&mut s.optim.critic, &ck.group("critic")?.optim);
                optim(&mut s.optim.alpha, &ck.group("log_alpha")?.optim);
                s.updates = updates;
            }
            Agent::Dqn(d) => {
                load(&mut d.nets.encoder, ck, "encoder")?;
                load(&mut d.nets.q, ck, "q")?;
                load(&mut d.nets.target_encoder, ck, "target_encoder")?;
                load(&mut d.nets.target_q, ck, "target_q")?;
                optim(&mut d.encoder_optim, &ck.group("encoder")?.optim);
                optim(&mut d.q_optim, &ck.group("q")?.optim);
                d.updates = updates;
            }
        }
        Ok((cfg, agent))
    }
}

/// The last `n` observations of the current episode, padded with its first.
#[derive(Clone, Debug)]
pub struct History {
    n: usize,
    items: VecDeque<Arc<Observation>>,
}

impl History {
    pub fn new(n: usize, first: Arc<Observation>) -> Self {
        Self {
            n,
            items: std::iter::repeat_n(first, n).collect(),
        }
    }

    pub fn push(&mut self, obs: Arc<Observation>) {
        self.items.pop_front();
        self.items.push_back(obs);
    }

    pub fn window(&self) -> Window {
        debug_assert_eq!(self.items.len(), self.n);
        self.items.iter().cloned().collect()
    }
}

/// Holds `action` for up to `repeat` simulator steps; returns the summed
/// reward, the final step result and the number of steps taken.
fn repeat_step(
    env: &mut dyn Environment,
    action: &Action,
    repeat: usize,
) -> (f64, crate::envs::StepResult, u64) {
    let mut total = 0.0;
    let mut taken = 0;
    loop {
        let r = env.step(action);
        total += r.reward;
        taken += 1;
        if r.done || taken == repeat {
            return (total, r, taken as u64);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub returns: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `episodes` greedy episodes on fresh environments.
pub fn evaluate(
    agent: &Agent,
    cfg: &RunConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalResult, HarnessError> {
    evaluate_with(cfg, episodes, agent.window(), rng, |w, r| {
        agent.greedy(w, r)
    })
}

/// Evaluation with an arbitrary policy over observation windows.
pub fn evaluate_with(
    cfg: &RunConfig,
    episodes: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
    mut policy: impl FnMut(&Window, &mut ChaCha8Rng) -> Result<Action, HarnessError>,
) -> Result<EvalResult, HarnessError> {
    let mut env = cfg.env_config().build(cfg.mode.obs_mode());
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let seed = rng.gen::<u64>() | EVAL_SEED_BIT;
        let mut hist = History::new(window, Arc::new(env.reset(seed)));
        let mut ret = 0.0;
        loop {
            let action = policy(&hist.window(), rng)?;
            let (r, step, _) = repeat_step(env.as_mut(), &action, cfg.action_repeat);
            ret += r;
            if step.done {
                break;
            }
            hist.push(Arc::new(step.observation));
        }
        returns.push(ret);
    }
    let (mean, std) = mean_std(&returns);
    Ok(EvalResult { mean, std, returns })
}

pub fn random_action(space: ActionSpace, rng: &mut ChaCha8Rng) -> Action {
    match space {
        ActionSpace::Continuous { dim } => {
            Action::Continuous((0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        }
        ActionSpace::Discrete { n } => Action::Discrete(rng.gen_range(0..n)),
    }
}

pub struct RunOutput {
    pub log: RunLog,
    pub agent: Agent,
    pub env_steps: u64,
}

#[derive(Default)]
struct Accum {
    critic: f64,
    actor: f64,
    count: usize,
}

impl Accum {
    fn take(&mut self) -> (Option<f64>, Option<f64>) {
        let out = if self.count == 0 {
            (None, None)
        } else {
            let n = self.count as f64;
            (Some(self.critic / n), Some(self.actor / n))
        };
        *self = Self::default();
        out
    }
}

pub fn run_training(cfg: &RunConfig, seed: u64) -> Result<RunOutput, HarnessError> {
    run_training_with(cfg, seed, |_| {})
}

/// Trains one (config, seed) pair; `on_record` sees each log row as it is
/// produced.
pub fn run_training_with(
    cfg: &RunConfig,
    seed: u64,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = Streams::new(seed);
    let obs_mode = cfg.mode.obs_mode();
    let mut env = cfg.env_config().build(obs_mode);
    let space = env.action_space();
    let mut agent = Agent::build(cfg, space, &mut rng.init)?;
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut log = RunLog::default();

    let mut env_step = 0u64;
    let mut agent_step = 0u64;
    let mut episode = 0u64;
    let mut obs = Arc::new(env.reset(rng.env.gen::<u64>() & !EVAL_SEED_BIT));
    let mut hist = History::new(agent.window(), obs.clone());
    let mut ep_return = 0.0;
    let mut last_return = None;
    let mut acc = Accum::default();
    let mut next_eval = 0u64;

    loop {
        if env_step >= next_eval || env_step >= cfg.total_steps {
            let eval = evaluate(&agent, cfg, cfg.eval_episodes, &mut rng.eval)?;
            let (critic_loss, actor_loss) = acc.take();
            let alpha = match &agent {
                Agent::Sac(s) => Some(s.nets.alpha()),
                Agent::Dqn(d) => Some(d.hyper.epsilon_at(env_step, cfg.total_steps)),
            };
            let record = LogRecord {
                env_step,
                episode_return: last_return,
                eval_return_mean: eval.mean,
                eval_return_std: eval.std,
                critic_loss,
                actor_loss,
                alpha,
            };
            on_record(&record);
            log.push(record, started.elapsed().as_secs_f64())?;
            while next_eval <= env_step {
                next_eval += cfg.eval_interval;
            }
        }
        if env_step >= cfg.total_steps {
            break;
        }

        let warm = env_step < cfg.initial_steps;
        let action = match &agent {
            _ if warm => random_action(space, &mut rng.train),
            Agent::Sac(s) => Action::Continuous(s.act(&hist.window(), false, &mut rng.train)?),
            Agent::Dqn(d) => {
                let eps = d.hyper.epsilon_at(env_step, cfg.total_steps);
                Action::Discrete(d.act(&hist.window(), eps, &mut rng.train)?)
            }
        };
        let (reward, step, taken) = repeat_step(env.as_mut(), &action, cfg.action_repeat);
        env_step += taken;
        agent_step += 1;
        ep_return += reward;
        let next = Arc::new(step.observation);
        buffer.push(Transition {
            obs: obs.clone(),
            action,
            reward,
            next_obs: next.clone(),
            done: step.terminal,
            episode,
        });

        if env_step >= cfg.initial_steps {
            let losses = match &mut agent {
                Agent::Sac(s) => {
                    let mut last = None;
                    for _ in 0..cfg.sac_updates_per_step {
                        last = match s.train_step(&buffer, &mut rng.train, &mut rng.augment) {
                            Ok(m) => Some((m.critic_loss, m.actor_loss)),
                            Err(SacError::NonFinite(_)) => Some((f64::NAN, f64::NAN)),
                            Err(e) => return Err(e.into()),
                        };
                        if last.is_some_and(|(c, a): (f64, f64)| !(c.is_finite() && a.is_finite()))
                        {
                            break;
                        }
                    }
                    last
                }
                Agent::Dqn(d) if agent_step.is_multiple_of(cfg.dqn_update_every) => {
                    Some((d.train_step(&buffer, &mut rng.train)?.q_loss, 0.0))
                }
                Agent::Dqn(_) => None,
            };
            if let Some((critic, actor)) = losses {
                if !(critic.is_finite() && actor.is_finite()) {
                    return Err(HarnessError::Diverged {
                        env_step,
                        snapshot: Box::new(agent.checkpoint(cfg, seed, env_step)?),
                    });
                }
                acc.critic += critic;
                acc.actor += actor;
                acc.count += 1;
            }
        }

        if step.done {
            last_return = Some(ep_return);
            ep_return = 0.0;
            episode += 1;
            obs = Arc::new(env.reset(rng.env.gen::<u64>() & !EVAL_SEED_BIT));
            hist = History::new(agent.window(), obs.clone());
        } else {
            obs = next;
            hist.push(obs.clone());
        }
    }
    if let Agent::Dqn(_) = agent {
        // The actor column has no meaning for value-based learners.
        for r in &mut log.records {
            r.actor_loss = None;
        }
    }
    Ok(RunOutput {
        log,
        agent,
        env_steps: env_step,
    })
}

/// Output root: `$FLARE_OUTPUT`, or `runs` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(super::OUTPUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn run_dir(root: &Path, cfg: &RunConfig, seed: u64) -> PathBuf {
    root.join(&cfg.name).join(format!("seed_{seed}"))
}

/// Trains and writes `log.csv`, its timing sidecar, `config.toml` and
/// `checkpoint.json` under the run directory. A diverged run leaves
/// `diagnostic.json` instead of a checkpoint.
pub fn train_and_save(
    cfg: &RunConfig,
    seed: u64,
    root: &Path,
    on_record: impl FnMut(&LogRecord),
) -> Result<RunOutput, HarnessError> {
    let dir = run_dir(root, cfg, seed);
    std::fs::create_dir_all(&dir)?;
    for stale in ["checkpoint.json", "diagnostic.json"] {
        let _ = std::fs::remove_file(dir.join(stale));
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    match run_training_with(cfg, seed, on_record) {
        Ok(out) => {
            out.log.save(&dir.join("log.csv"))?;
            out.agent
                .checkpoint(cfg, seed, out.env_steps)?
                .save(&dir.join("checkpoint.json"))?;
            Ok(out)
        }
        Err(HarnessError::Diverged { env_step, snapshot }) => {
            snapshot.save(&dir.join("diagnostic.json"))?;
            Err(HarnessError::Diverged { env_step, snapshot })
        }
        Err(e) => Err(e),
    }
}
