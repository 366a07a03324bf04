//! Soft actor-critic with twin critics, a tanh-squashed Gaussian policy, a
//! learned temperature and EMA target copies of the critics and encoder.
//!
//! The critic loss trains the representation; the actor reads detached
//! features, so it never moves the encoder.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{center_translate, random_translate, AugmentError, TranslateSpec};
use crate::envs::{Action, Frame, Observation};
use crate::nn::{
    adam_step, AdamConfig, Bind, Graph, Mlp, NnError, OptimState, ParamSet, Scalar, Tensor, Var,
};
use crate::replay::{Batch, ReplayBuffer, ReplayError, Window};
use crate::representation::{ReprError, Representation, WindowBatch};


const LOG_ALPHA: &str = "log_alpha";

#[derive(Debug, Error)]
pub enum SacError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Config(String),
}

/// Learner hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacHyper {
    pub gamma: f64,
    pub critic_tau: f64,
    pub encoder_tau: f64,
    pub target_update_every: u64,
    pub init_temperature: f64,
    /// Defaults to minus the action dimension.
    pub target_entropy: Option<f64>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub encoder_lr: f64,
    pub alpha_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl Default for SacHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            critic_tau: 0.01,
            encoder_tau: 0.05,
            target_update_every: 2,
            init_temperature: 0.1,
            target_entropy: None,
            actor_lr: 2e-4,
            critic_lr: 2e-4,
            encoder_lr: 1e-3,
            alpha_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            log_std_min: -10.0,
            log_std_max: 2.0,
            batch_size: 128,
            hidden_dim: 1024,
            hidden_layers: 2,
        }
    }
}

impl SacHyper {
    /// Settings used for state-space experiments.
    pub fn state_defaults() -> Self {
        Self {
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            alpha_beta1: 0.9,
            batch_size: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SacError> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(SacError::Config(format!(
                "gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        if !unit(self.critic_tau) || !unit(self.encoder_tau) {
            return Err(SacError::Config("EMA rates must lie in (0, 1]".into()));
        }
        if self.init_temperature <= 0.0 {
            return Err(SacError::Config(
                "initial temperature must be positive".into(),
            ));
        }
        if self.log_std_min >= self.log_std_max {
            return Err(SacError::Config("log-std bounds are inverted".into()));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.target_update_every == 0 {
            return Err(SacError::Config(
                "batch size, hidden width and target period must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Network shapes shared by online and target copies.
#[derive(Clone, Debug, PartialEq)]
pub struct SacArch {
    pub repr: Representation,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub action_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

/// Every parameter group of the learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SacNets<T> {
    pub encoder: ParamSet<T>,
    pub actor: ParamSet<T>,
    pub critic: ParamSet<T>,
    pub target_encoder: ParamSet<T>,
    pub target_critic: ParamSet<T>,
    pub log_alpha: ParamSet<T>,
}

impl<T: Scalar> SacNets<T> {
    pub fn alpha(&self) -> f64 {
        self.log_alpha
            .get(LOG_ALPHA)
            .map_or(f64::NAN, |t| t.data()[0].as_f64().exp())
    }

    pub fn set_log_alpha(&mut self, v: f64) {
        self.log_alpha
            .insert(LOG_ALPHA, Tensor::from_f64(&[1], &[v]).expect("scalar"));
    }

    pub fn groups(&self) -> [(&'static str, &ParamSet<T>); 6] {
        [
            ("encoder", &self.encoder),
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("target_encoder", &self.target_encoder),
            ("target_critic", &self.target_critic),
            ("log_alpha", &self.log_alpha),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SacOptim<T> {
    pub encoder: OptimState<T>,
    pub actor: OptimState<T>,
    pub critic: OptimState<T>,
    pub alpha: OptimState<T>,
}

/// Graph nodes of one reparameterized policy draw.
#[derive(Clone, Copy, Debug)]
pub struct PolicySample {
    pub mean: Var,
    pub log_std: Var,
    pub action: Var,
    /// `[B, 1]`.
    pub log_prob: Var,
}

impl SacArch {
    pub fn new(repr: Representation, action_dim: usize, hyper: &SacHyper) -> Self {
        let feat = repr.feature_dim();
        let hidden = vec![hyper.hidden_dim; hyper.hidden_layers];
        let dims = |input: usize, out: usize| [&[input][..], &hidden, &[out]].concat();
        Self {
            actor: Mlp::new("actor", &dims(feat, 2 * action_dim)),
            critic1: Mlp::new("critic1", &dims(feat + action_dim, 1)),
            critic2: Mlp::new("critic2", &dims(feat + action_dim, 1)),
            repr,
            action_dim,
            log_std_min: hyper.log_std_min,
            log_std_max: hyper.log_std_max,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        init_temperature: f64,
        rng: &mut R,
    ) -> SacNets<T> {
        let encoder = self.repr.init(rng);
        let mut actor = ParamSet::new();
        self.actor.init(&mut actor, rng);
        let mut critic = ParamSet::new();
        self.critic1.init(&mut critic, rng);
        self.critic2.init(&mut critic, rng);
        let mut nets = SacNets {
            target_encoder: encoder.clone(),
            target_critic: critic.clone(),
            encoder,
            actor,
            critic,
            log_alpha: ParamSet::new(),
        };
        nets.set_log_alpha(init_temperature.ln());
        nets
    }

    /// Mean and bounded log-std heads.
    pub fn policy_heads<T: Scalar>(
        &self,
        g: &Graph<T>,
        actor: Bind<'_, T>,
        feature: Var,
    ) -> Result<(Var, Var), SacError> {
        let a = self.action_dim;
        let out = self.actor.forward(g, actor, feature)?;
        let mean = g.slice_cols(out, 0, a);
        let half = 0.5 * (self.log_std_max - self.log_std_min);
        let log_std = g.offset(
            g.scale(g.tanh(g.slice_cols(out, a, 2 * a)), half),
            self.log_std_min + half,
        );
        Ok((mean, log_std))
    }

    /// Draws `tanh(mean + std * noise)` and its log-density, including the
    /// change of variables through `tanh`.
    pub fn policy_sample<T: Scalar>(
        &self,
        g: &Graph<T>,
        actor: Bind<'_, T>,
        feature: Var,
        noise: &Tensor<T>,
    ) -> Result<PolicySample, SacError> {
        let (mean, log_std) = self.policy_heads(g, actor, feature)?;
        if g.shape(mean) != noise.shape() {
            return Err(SacError::Config(format!(
                "noise shape {:?} does not match policy {:?}",
                noise.shape(),
                g.shape(mean)
            )));
        }
        let u = g.add(mean, g.mul(g.exp(log_std), g.input(noise.clone())));
        let action = g.tanh(u);
        let a = self.action_dim as f64;
        let base: Vec<T> = (0..noise.rows())
            .map(|r| {
                let sq: f64 = noise.row_slice(r).iter().map(|e| e.as_f64().powi(2)).sum();
                T::from_f64(-0.5 * sq - 0.5 * a * (2.0 * std::f64::consts::PI).ln())
            })
            .collect();
        let gauss = g.sub(
            g.input(Tensor::new(vec![noise.rows(), 1], base)?),
            g.row_sum(log_std),
        );
        let log_jac = g.scale(
            g.offset(g.neg(g.add(u, g.softplus(g.scale(u, -2.0)))), LN_2),
            2.0,
        );
        let log_prob = g.sub(gauss, g.row_sum(log_jac));
        Ok(PolicySample {
            mean,
            log_std,
            action,
            log_prob,
        })
    }

    pub fn q_values<T: Scalar>(
        &self,
        g: &Graph<T>,
        critic: Bind<'_, T>,
        feature: Var,
        action: Var,
    ) -> Result<(Var, Var), SacError> {
        let x = g.concat(&[feature, action]);
        Ok((
            self.critic1.forward(g, critic, x)?,
            self.critic2.forward(g, critic, x)?,
        ))
    }
}

/// `min(q1, q2) - alpha * log_prob`, elementwise.
pub fn soft_value<T: Scalar>(g: &Graph<T>, q1: Var, q2: Var, log_prob: Var, alpha: f64) -> Var {
    g.sub(g.minimum(q1, q2), g.scale(log_prob, alpha))
}

/// `r + gamma * (1 - done) * v` for plain vectors.
pub fn bellman_targets(rewards: &[f64], dones: &[bool], values: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(values)
        .map(|((r, &d), v)| r + if d { 0.0 } else { gamma * v })
        .collect()
}

/// Mean over the batch and both critics of the squared residual.
pub fn twin_critic_loss<T: Scalar>(g: &Graph<T>, q1: Var, q2: Var, target: Var) -> Var {
    let l1 = g.mean(g.square(g.sub(q1, target)));
    let l2 = g.mean(g.square(g.sub(q2, target)));
    g.scale(g.add(l1, l2), 0.5)
}

/// Exponential moving average `target <- (1 - tau) target + tau online`.
pub fn ema_update<T: Scalar>(
    online: &ParamSet<T>,
    target: &mut ParamSet<T>,
    tau: f64,
) -> Result<(), SacError> {
    online.check_same_layout(target)?;
    let mix = T::from_f64(tau);
    for (key, t) in target.iter_mut() {
        let o = online.require(key)?;
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = if tau >= 1.0 { b } else { *a + mix * (b - *a) };
        }
    }
    Ok(())
}

/// One Adam step on `-log_alpha * mean(log_pi + target_entropy)`; returns
/// the loss.
pub fn alpha_update<T: Scalar>(
    log_alpha: &mut ParamSet<T>,
    optim: &mut OptimState<T>,
    log_probs: &[f64],
    target_entropy: f64,
) -> Result<f64, SacError> {
    let value = log_alpha.require(LOG_ALPHA)?.data()[0].as_f64();
    let mean = log_probs.iter().sum::<f64>() / log_probs.len().max(1) as f64 + target_entropy;
    let mut grads = crate::nn::GradSet::new();
    grads.accumulate(LOG_ALPHA, Tensor::from_f64(&[1], &[-mean])?);
    adam_step(log_alpha, &grads, optim)?;
    Ok(-value * mean)
}

/// Model-side view of a sampled minibatch.
#[derive(Clone, Debug)]
pub struct SacBatch<T> {
    pub obs: WindowBatch<T>,
    pub actions: Tensor<T>,
    pub rewards: Vec<f64>,
    pub next_obs: WindowBatch<T>,
    pub dones: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SacMetrics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub batch_reward_mean: f64,
    pub q_mean: f64,
    pub entropy: f64,
}

/// Pads frames into the augmented canvas; random placement while training,
/// centered when acting.
pub fn augment_windows<R: Rng + ?Sized>(
    windows: &[Window],
    spec: Option<&TranslateSpec>,
    rng: Option<&mut R>,
) -> Result<Vec<Window>, SacError> {
    let Some(spec) = spec else {
        return Ok(windows.to_vec());
    };
    let mut rng = rng;
    windows
        .iter()
        .map(|w| {
            let frames = w
                .iter()
                .map(|o| match &**o {
                    Observation::Pixels(f) => Ok(std::sync::Arc::new(f.clone())),
                    _ => Err(SacError::Config(
                        "augmentation needs pixel observations".into(),
                    )),
                })
                .collect::<Result<Vec<std::sync::Arc<Frame>>, _>>()?;
            let placed = match rng.as_deref_mut() {
                Some(r) => random_translate(&frames, spec, r)?.0,
                None => center_translate(&frames, spec)?,
            };
            Ok(placed
                .into_iter()
                .map(|f| std::sync::Arc::new(Observation::Pixels((*f).clone())))
                .collect())
        })
        .collect()
}

pub fn action_tensor<T: Scalar>(actions: &[Action], dim: usize) -> Result<Tensor<T>, SacError> {
    let mut data = Vec::with_capacity(actions.len() * dim);
    for a in actions {
        match a {
            Action::Continuous(v) if v.len() == dim => {
                data.extend(v.iter().map(|&x| T::from_f64(x)))
            }
            _ => {
                return Err(SacError::Config(format!(
                    "expected {dim}-dimensional continuous actions"
                )))
            }
        }
    }
    Ok(Tensor::new(vec![actions.len(), dim], data)?)
}

pub fn normal_noise<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("noise shape")
}

/// The complete learner state.
#[derive(Clone, Debug)]
pub struct Sac<T: Scalar> {
    pub arch: SacArch,
    pub hyper: SacHyper,
    pub nets: SacNets<T>,
    pub optim: SacOptim<T>,
    pub augment: Option<TranslateSpec>,
    pub updates: u64,
}

impl<T: Scalar> Sac<T> {
    pub fn new<R: Rng + ?Sized>(
        repr: Representation,
        action_dim: usize,
        hyper: SacHyper,
        augment: Option<TranslateSpec>,
        rng: &mut R,
    ) -> Result<Self, SacError> {
        hyper.validate()?;
        let arch = SacArch::new(repr, action_dim, &hyper);
        let nets = arch.init(hyper.init_temperature, rng);
        let adam = |lr| OptimState::new(AdamConfig::new(lr, hyper.beta1, hyper.beta2));
        let optim = SacOptim {
            encoder: adam(hyper.encoder_lr),
            actor: adam(hyper.actor_lr),
            critic: adam(hyper.critic_lr),
            alpha: OptimState::new(AdamConfig::new(
                hyper.alpha_lr,
                hyper.alpha_beta1,
                hyper.alpha_beta2,
            )),
        };
        Ok(Self {
            arch,
            hyper,
            nets,
            optim,
            augment,
            updates: 0,
        })
    }

    pub fn target_entropy(&self) -> f64 {
        self.hyper
            .target_entropy
            .unwrap_or(-(self.arch.action_dim as f64))
    }

    pub fn window(&self) -> usize {
        self.arch.repr.window()
    }

    /// Converts a replay batch, applying training-time augmentation.
    pub fn prepare<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        aug_rng: &mut R,
    ) -> Result<SacBatch<T>, SacError> {
        let obs = augment_windows(&batch.obs, self.augment.as_ref(), Some(&mut *aug_rng))?;
        let next = augment_windows(&batch.next_obs, self.augment.as_ref(), Some(&mut *aug_rng))?;
        Ok(SacBatch {
            obs: WindowBatch::from_observations(&obs)?,
            actions: action_tensor(&batch.actions, self.arch.action_dim)?,
            rewards: batch.rewards.clone(),
            next_obs: WindowBatch::from_observations(&next)?,
            dones: batch.dones.clone(),
        })
    }

    /// Soft state values of the next observations under the target critics
    /// and target encoder, with actions drawn from the current policy.
    pub fn target_values(
        &self,
        next_obs: &WindowBatch<T>,
        noise: &Tensor<T>,
    ) -> Result<Vec<f64>, SacError> {
        let g = Graph::new();
        let arch = &self.arch;
        let feat = arch
            .repr
            .forward(&g, Bind::frozen(&self.nets.encoder), next_obs)?;
        let pi = arch.policy_sample(&g, Bind::frozen(&self.nets.actor), feat, noise)?;
        let target_feat =
            arch.repr
                .forward(&g, Bind::frozen(&self.nets.target_encoder), next_obs)?;
        let (q1, q2) = arch.q_values(
            &g,
            Bind::frozen(&self.nets.target_critic),
            target_feat,
            pi.action,
        )?;
        let v = soft_value(&g, q1, q2, pi.log_prob, self.nets.alpha());
        Ok(g.tensor(v).to_f64_vec())
    }

    /// Builds the critic loss on `g`; returns the loss and mean online Q.
    pub fn critic_loss(
        &self,
        g: &Graph<T>,
        batch: &SacBatch<T>,
        next_noise: &Tensor<T>,
    ) -> Result<(Var, f64), SacError> {
        let v = self.target_values(&batch.next_obs, next_noise)?;
        let y = bellman_targets(&batch.rewards, &batch.dones, &v, self.hyper.gamma);
        let target = g.input(Tensor::from_f64(&[y.len(), 1], &y)?);
        let feat = self
            .arch
            .repr
            .forward(g, Bind::trainable(&self.nets.encoder), &batch.obs)?;
        let action = g.input(batch.actions.clone());
        let (q1, q2) = self
            .arch
            .q_values(g, Bind::trainable(&self.nets.critic), feat, action)?;
        let q_mean = g.tensor(q1).to_f64_vec().iter().sum::<f64>() / y.len().max(1) as f64;
        Ok((twin_critic_loss(g, q1, q2, target), q_mean))
    }

    /// Builds the actor loss on `g` from detached features; returns the loss
    /// node and the per-sample log-probabilities.
    pub fn actor_loss(
        &self,
        g: &Graph<T>,
        obs: &WindowBatch<T>,
        noise: &Tensor<T>,
    ) -> Result<(Var, Vec<f64>), SacError> {
        let feat = self
            .arch
            .repr
            .forward(g, Bind::frozen(&self.nets.encoder), obs)?;
        let feat = g.detach(feat);
        let pi = self
            .arch
            .policy_sample(g, Bind::trainable(&self.nets.actor), feat, noise)?;
        let (q1, q2) = self
            .arch
            .q_values(g, Bind::frozen(&self.nets.critic), feat, pi.action)?;
        let per = g.sub(g.scale(pi.log_prob, self.nets.alpha()), g.minimum(q1, q2));
        Ok((g.mean(per), g.tensor(pi.log_prob).to_f64_vec()))
    }

    /// Samples, augments, then updates critic, actor and temperature, and
    /// moves the targets every `target_update_every` calls.
    pub fn train_step<R: Rng + ?Sized, A: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut R,
        aug_rng: &mut A,
    ) -> Result<SacMetrics, SacError> {
        let raw = buffer.sample(self.hyper.batch_size, self.window(), rng)?;
        let batch = self.prepare(&raw, aug_rng)?;
        self.update(&batch, rng)
    }

    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &SacBatch<T>,
        rng: &mut R,
    ) -> Result<SacMetrics, SacError> {
        let b = batch.rewards.len();
        let a = self.arch.action_dim;
        let next_noise = normal_noise(b, a, rng);
        let g = Graph::new();
        let (loss, q_mean) = self.critic_loss(&g, batch, &next_noise)?;
        let critic_loss = g.scalar(loss).as_f64();
        let grads = g.backward(loss)?.into_params();
        drop(g);
        adam_step(&mut self.nets.critic, &grads, &mut self.optim.critic)?;
        if self.arch.repr.has_params() {
            adam_step(&mut self.nets.encoder, &grads, &mut self.optim.encoder)?;
        }

        let noise = normal_noise(b, a, rng);
        let g = Graph::new();
        let (loss, log_probs) = self.actor_loss(&g, &batch.obs, &noise)?;
        let actor_loss = g.scalar(loss).as_f64();
        let grads = g.backward(loss)?.into_params();
        drop(g);
        adam_step(&mut self.nets.actor, &grads, &mut self.optim.actor)?;

        let target_entropy = self.target_entropy();
        let alpha_loss = alpha_update(
            &mut self.nets.log_alpha,
            &mut self.optim.alpha,
            &log_probs,
            target_entropy,
        )?;

        self.updates += 1;
        if self.updates.is_multiple_of(self.hyper.target_update_every) {
            ema_update(
                &self.nets.critic,
                &mut self.nets.target_critic,
                self.hyper.critic_tau,
            )?;
            ema_update(
                &self.nets.encoder,
                &mut self.nets.target_encoder,
                self.hyper.encoder_tau,
            )?;
        }
        let metrics = SacMetrics {
            critic_loss,
            actor_loss,
            alpha_loss,
            alpha: self.nets.alpha(),
            batch_reward_mean: batch.rewards.iter().sum::<f64>() / b.max(1) as f64,
            q_mean,
            entropy: -log_probs.iter().sum::<f64>() / b.max(1) as f64,
        };
        if ![metrics.critic_loss, metrics.actor_loss, metrics.alpha]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(SacError::NonFinite("training metrics"));
        }
        Ok(metrics)
    }

    /// Policy action for one observation window: the squashed mean when
    /// `deterministic`, a sample otherwise.
    pub fn act<R: Rng + ?Sized>(
        &self,
        window: &Window,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>, SacError> {
        let placed =
            augment_windows::<R>(std::slice::from_ref(window), self.augment.as_ref(), None)?;
        let obs = WindowBatch::from_observations(&placed)?;
        let g = Graph::new();
        let feat = self
            .arch
            .repr
            .forward(&g, Bind::frozen(&self.nets.encoder), &obs)?;
        let action = if deterministic {
            let (mean, _) = self
                .arch
                .policy_heads(&g, Bind::frozen(&self.nets.actor), feat)?;
            g.tanh(mean)
        } else {
            let noise = normal_noise(1, self.arch.action_dim, rng);
            self.arch
                .policy_sample(&g, Bind::frozen(&self.nets.actor), feat, &noise)?
                .action
        };
        let out = g.tensor(action).to_f64_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(SacError::NonFinite("policy output"));
        }
        Ok(out)
    }
}
