//! Discrete-action Q-learning over any representation: an MLP Q head on top
//! of the shared features, a hard-copied target network and an epsilon-greedy
//! behaviour policy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::Action;
use crate::nn::{
    adam_step, AdamConfig, Bind, Graph, Mlp, NnError, OptimState, ParamSet, Scalar, Tensor, Var,
};
use crate::replay::{ReplayBuffer, ReplayError, Window};
use crate::representation::{ReprError, Representation, WindowBatch};

#[derive(Debug, Error)]
pub enum DqnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("{0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnHyper {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Learner steps between hard target copies.
    pub target_update_every: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the run over which epsilon decays linearly.
    pub epsilon_fraction: f64,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl Default for DqnHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-4,
            batch_size: 32,
            target_update_every: 1000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.2,
            hidden_dim: 256,
            hidden_layers: 1,
        }
    }
}

impl DqnHyper {
    pub fn validate(&self) -> Result<(), DqnError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(DqnError::Config(format!(
                "gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.epsilon_start)
            || !unit(self.epsilon_end)
            || self.epsilon_end > self.epsilon_start
        {
            return Err(DqnError::Config("epsilon must decay within [0, 1]".into()));
        }
        if self.batch_size == 0 || self.target_update_every == 0 || self.hidden_dim == 0 {
            return Err(DqnError::Config(
                "batch size, target period and hidden width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Linearly decayed exploration rate at `step` of a `total`-step run.
    pub fn epsilon_at(&self, step: u64, total: u64) -> f64 {
        let span = (self.epsilon_fraction * total as f64).max(1.0);
        let frac = step as f64 / span;
        if frac >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Uniform action with probability `epsilon`, otherwise the greedy one.
pub fn epsilon_greedy<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct QNets<T> {
    pub encoder: ParamSet<T>,
    pub q: ParamSet<T>,
    pub target_encoder: ParamSet<T>,
    pub target_q: ParamSet<T>,
}

/// Model-side view of a sampled minibatch.
#[derive(Clone, Debug)]
pub struct DqnBatch<T> {
    pub obs: WindowBatch<T>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: WindowBatch<T>,
    pub dones: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DqnMetrics {
    pub q_loss: f64,
    pub q_mean: f64,
    pub batch_reward_mean: f64,
}

#[derive(Clone, Debug)]
pub struct Dqn<T: Scalar> {
    pub repr: Representation,
    pub head: Mlp,
    pub n_actions: usize,
    pub hyper: DqnHyper,
    pub nets: QNets<T>,
    pub encoder_optim: OptimState<T>,
    pub q_optim: OptimState<T>,
    pub updates: u64,
}

impl<T: Scalar> Dqn<T> {
    pub fn new<R: Rng + ?Sized>(
        repr: Representation,
        n_actions: usize,
        hyper: DqnHyper,
        rng: &mut R,
    ) -> Result<Self, DqnError> {
        hyper.validate()?;
        let hidden = vec![hyper.hidden_dim; hyper.hidden_layers];
        let dims = [&[repr.feature_dim()][..], &hidden, &[n_actions]].concat();
        let head = Mlp::new("q", &dims);
        let encoder = repr.init(rng);
        let mut q = ParamSet::new();
        head.init(&mut q, rng);
        let adam = || OptimState::new(AdamConfig::new(hyper.lr, 0.9, 0.999));
        Ok(Self {
            nets: QNets {
                target_encoder: encoder.clone(),
                target_q: q.clone(),
                encoder,
                q,
            },
            encoder_optim: adam(),
            q_optim: adam(),
            repr,
            head,
            n_actions,
            hyper,
            updates: 0,
        })
    }

    /// `[B, n_actions]` values.
    pub fn q_values(
        &self,
        g: &Graph<T>,
        encoder: Bind<'_, T>,
        q: Bind<'_, T>,
        obs: &WindowBatch<T>,
    ) -> Result<Var, DqnError> {
        let feat = self.repr.forward(g, encoder, obs)?;
        Ok(self.head.forward(g, q, feat)?)
    }

    /// Bootstrapped targets from the target network, with no gradient path.
    pub fn targets(&self, batch: &DqnBatch<T>) -> Result<Vec<f64>, DqnError> {
        let g = Graph::new();
        let q = self.q_values(
            &g,
            Bind::frozen(&self.nets.target_encoder),
            Bind::frozen(&self.nets.target_q),
            &batch.next_obs,
        )?;
        let q = g.tensor(q).to_f64_vec();
        Ok(batch
            .rewards
            .iter()
            .zip(&batch.dones)
            .zip(q.chunks(self.n_actions))
            .map(|((r, &d), row)| {
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                r + if d { 0.0 } else { self.hyper.gamma * best }
            })
            .collect())
    }

    /// Mean squared TD error on `g`; returns the loss and mean chosen Q.
    pub fn q_loss(&self, g: &Graph<T>, batch: &DqnBatch<T>) -> Result<(Var, f64), DqnError> {
        let y = self.targets(batch)?;
        let q = self.q_values(
            g,
            Bind::trainable(&self.nets.encoder),
            Bind::trainable(&self.nets.q),
            &batch.obs,
        )?;
        let chosen = g.gather(q, &batch.actions);
        let q_mean = g.tensor(chosen).to_f64_vec().iter().sum::<f64>() / y.len().max(1) as f64;
        let target = g.input(Tensor::from_f64(&[y.len(), 1], &y)?);
        Ok((g.mean(g.square(g.sub(chosen, target))), q_mean))
    }

    pub fn prepare(&self, batch: &crate::replay::Batch) -> Result<DqnBatch<T>, DqnError> {
        let actions = batch
            .actions
            .iter()
            .map(|a| match a {
                Action::Discrete(i) if *i < self.n_actions => Ok(*i),
                _ => Err(DqnError::Config(format!(
                    "expected a discrete action below {}",
                    self.n_actions
                ))),
            })
            .collect::<Result<_, _>>()?;
        Ok(DqnBatch {
            obs: WindowBatch::from_observations(&batch.obs)?,
            actions,
            rewards: batch.rewards.clone(),
            next_obs: WindowBatch::from_observations(&batch.next_obs)?,
            dones: batch.dones.clone(),
        })
    }

    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut R,
    ) -> Result<DqnMetrics, DqnError> {
        let raw = buffer.sample(self.hyper.batch_size, self.repr.window(), rng)?;
        let batch = self.prepare(&raw)?;
        self.update(&batch)
    }

    pub fn update(&mut self, batch: &DqnBatch<T>) -> Result<DqnMetrics, DqnError> {
        let g = Graph::new();
        let (loss, q_mean) = self.q_loss(&g, batch)?;
        let q_loss = g.scalar(loss).as_f64();
        let grads = g.backward(loss)?.into_params();
        drop(g);
        adam_step(&mut self.nets.q, &grads, &mut self.q_optim)?;
        if self.repr.has_params() {
            adam_step(&mut self.nets.encoder, &grads, &mut self.encoder_optim)?;
        }
        self.updates += 1;
        if self.updates.is_multiple_of(self.hyper.target_update_every) {
            self.nets.target_encoder = self.nets.encoder.clone();
            self.nets.target_q = self.nets.q.clone();
        }
        let b = batch.rewards.len().max(1) as f64;
        Ok(DqnMetrics {
            q_loss,
            q_mean,
            batch_reward_mean: batch.rewards.iter().sum::<f64>() / b,
        })
    }

    pub fn values(&self, window: &Window) -> Result<Vec<f64>, DqnError> {
        let obs = WindowBatch::from_observations(std::slice::from_ref(window))?;
        let g = Graph::new();
        let q = self.q_values(
            &g,
            Bind::frozen(&self.nets.encoder),
            Bind::frozen(&self.nets.q),
            &obs,
        )?;
        Ok(g.tensor(q).to_f64_vec())
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        window: &Window,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<usize, DqnError> {
        Ok(epsilon_greedy(&self.values(window)?, epsilon, rng))
    }
}
