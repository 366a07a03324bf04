//! Flat, typed run configuration stored as TOML.
//!
//! Every key is top-level. A file may list other files under `include`;
//! included keys are applied first, in order, and the including file
//! overrides them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::augment::TranslateSpec;
use crate::dqn::DqnHyper;
use crate::envs::{DotCatchConfig, EnvConfig, PendulumConfig};
use crate::representation::{EncoderSpec, InputShape, RepresentationMode};
use crate::sac::SacHyper;

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Sac,
    Dqn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Pendulum,
    DotCatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Variant label used for output paths and plot legends.
    pub name: String,
    pub env: EnvId,
    pub mode: RepresentationMode,
    pub frames: usize,
    pub learner: Learner,
    /// Environment (simulator) steps.
    pub total_steps: u64,
    /// Random-action environment steps before learning starts.
    pub initial_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub action_repeat: usize,
    pub replay_capacity: usize,
    pub seeds: Vec<u64>,

    /// Pixels added to each side length by random translation; 0 disables it.
    pub augment_pad: usize,
    pub conv_layers: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub latent_dim: usize,
    pub head_dim: usize,

    pub pendulum_gravity: f64,
    pub pendulum_length: f64,
    pub pendulum_mass: f64,
    pub pendulum_max_torque: f64,
    pub pendulum_dt: f64,
    pub pendulum_max_speed: f64,
    pub pendulum_horizon: usize,
    pub pendulum_reward_cos_threshold: f64,
    pub pendulum_init_angle_noise: f64,
    pub pendulum_init_velocity_noise: f64,
    pub pendulum_frame_size: usize,

    pub dot_cols: usize,
    pub dot_rows: usize,
    pub dot_paddle_width: usize,
    pub dot_drift_speeds: Vec<i64>,
    pub dot_cell_pixels: usize,

    pub sac_gamma: f64,
    pub sac_critic_tau: f64,
    pub sac_encoder_tau: f64,
    pub sac_target_update_every: u64,
    pub sac_init_temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sac_target_entropy: Option<f64>,
    pub sac_actor_lr: f64,
    pub sac_critic_lr: f64,
    pub sac_encoder_lr: f64,
    pub sac_alpha_lr: f64,
    pub sac_beta1: f64,
    pub sac_beta2: f64,
    pub sac_alpha_beta1: f64,
    pub sac_alpha_beta2: f64,
    pub sac_log_std_min: f64,
    pub sac_log_std_max: f64,
    pub sac_batch_size: usize,
    pub sac_hidden_dim: usize,
    pub sac_hidden_layers: usize,
    /// Learner updates after each agent step.
    pub sac_updates_per_step: usize,

    pub dqn_gamma: f64,
    pub dqn_lr: f64,
    pub dqn_batch_size: usize,
    pub dqn_target_update_every: u64,
    pub dqn_epsilon_start: f64,
    pub dqn_epsilon_end: f64,
    pub dqn_epsilon_fraction: f64,
    pub dqn_hidden_dim: usize,
    pub dqn_hidden_layers: usize,
    /// Agent steps between learner updates.
    pub dqn_update_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PendulumConfig::default();
        let d = DotCatchConfig::default();
        let s = SacHyper::default();
        let q = DqnHyper::default();
        let e = EncoderSpec::default();
        Self {
            name: "run".into(),
            env: EnvId::Pendulum,
            mode: RepresentationMode::FlarePixel,
            frames: 2,
            learner: Learner::Sac,
            total_steps: 150_000,
            initial_steps: 10_000,
            eval_interval: 10_000,
            eval_episodes: 10,
            action_repeat: 4,
            replay_capacity: 100_000,
            seeds: vec![0, 1, 2, 3, 4],
            augment_pad: 4,
            conv_layers: e.conv_layers,
            conv_filters: e.filters,
            conv_kernel: e.kernel,
            latent_dim: e.latent_dim,
            head_dim: e.head_dim,
            pendulum_gravity: p.gravity,
            pendulum_length: p.length,
            pendulum_mass: p.mass,
            pendulum_max_torque: p.max_torque,
            pendulum_dt: p.dt,
            pendulum_max_speed: p.max_speed,
            pendulum_horizon: p.horizon,
            pendulum_reward_cos_threshold: p.reward_cos_threshold,
            pendulum_init_angle_noise: p.init_angle_noise,
            pendulum_init_velocity_noise: p.init_velocity_noise,
            pendulum_frame_size: p.frame_size,
            dot_cols: d.cols,
            dot_rows: d.rows,
            dot_paddle_width: d.paddle_width,
            dot_drift_speeds: d.drift_speeds,
            dot_cell_pixels: d.cell_pixels,
            sac_gamma: s.gamma,
            sac_critic_tau: s.critic_tau,
            sac_encoder_tau: s.encoder_tau,
            sac_target_update_every: s.target_update_every,
            sac_init_temperature: s.init_temperature,
            sac_target_entropy: s.target_entropy,
            sac_actor_lr: s.actor_lr,
            sac_critic_lr: s.critic_lr,
            sac_encoder_lr: s.encoder_lr,
            sac_alpha_lr: s.alpha_lr,
            sac_beta1: s.beta1,
            sac_beta2: s.beta2,
            sac_alpha_beta1: s.alpha_beta1,
            sac_alpha_beta2: s.alpha_beta2,
            sac_log_std_min: s.log_std_min,
            sac_log_std_max: s.log_std_max,
            sac_updates_per_step: 1,
            sac_batch_size: s.batch_size,
            sac_hidden_dim: s.hidden_dim,
            sac_hidden_layers: s.hidden_layers,
            dqn_gamma: q.gamma,
            dqn_lr: q.lr,
            dqn_batch_size: q.batch_size,
            dqn_target_update_every: q.target_update_every,
            dqn_epsilon_start: q.epsilon_start,
            dqn_epsilon_end: q.epsilon_end,
            dqn_epsilon_fraction: q.epsilon_fraction,
            dqn_hidden_dim: q.hidden_dim,
            dqn_hidden_layers: q.hidden_layers,
            dqn_update_every: 1,
        }
    }
}

impl RunConfig {
    /// State-space defaults: no action repeat, larger buffer and batch.
    pub fn state_defaults() -> Self {
        let s = SacHyper::state_defaults();
        Self {
            mode: RepresentationMode::StateFull,
            frames: 1,
            total_steps: 100_000,
            initial_steps: 5_000,
            action_repeat: 1,
            replay_capacity: 2_000_000,
            augment_pad: 0,
            sac_actor_lr: s.actor_lr,
            sac_critic_lr: s.critic_lr,
            sac_alpha_beta1: s.alpha_beta1,
            sac_batch_size: s.batch_size,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        if table.contains_key("include") {
            return Err(HarnessError::Config(
                "`include` needs a file path to resolve against".into(),
            ));
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_table(load_table(path, 0)?)
    }

    fn from_table(table: toml::Table) -> Result<Self, HarnessError> {
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn env_config(&self) -> EnvConfig {
        match self.env {
            EnvId::Pendulum => EnvConfig::Pendulum(PendulumConfig {
                gravity: self.pendulum_gravity,
                length: self.pendulum_length,
                mass: self.pendulum_mass,
                max_torque: self.pendulum_max_torque,
                dt: self.pendulum_dt,
                max_speed: self.pendulum_max_speed,
                horizon: self.pendulum_horizon,
                reward_cos_threshold: self.pendulum_reward_cos_threshold,
                init_angle_noise: self.pendulum_init_angle_noise,
                init_velocity_noise: self.pendulum_init_velocity_noise,
                frame_size: self.pendulum_frame_size,
            }),
            EnvId::DotCatch => EnvConfig::DotCatch(DotCatchConfig {
                cols: self.dot_cols,
                rows: self.dot_rows,
                paddle_width: self.dot_paddle_width,
                drift_speeds: self.dot_drift_speeds.clone(),
                cell_pixels: self.dot_cell_pixels,
            }),
        }
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            conv_layers: self.conv_layers,
            filters: self.conv_filters,
            kernel: self.conv_kernel,
            latent_dim: self.latent_dim,
            head_dim: self.head_dim,
        }
    }

    pub fn sac_hyper(&self) -> SacHyper {
        SacHyper {
            gamma: self.sac_gamma,
            critic_tau: self.sac_critic_tau,
            encoder_tau: self.sac_encoder_tau,
            target_update_every: self.sac_target_update_every,
            init_temperature: self.sac_init_temperature,
            target_entropy: self.sac_target_entropy,
            actor_lr: self.sac_actor_lr,
            critic_lr: self.sac_critic_lr,
            encoder_lr: self.sac_encoder_lr,
            alpha_lr: self.sac_alpha_lr,
            beta1: self.sac_beta1,
            beta2: self.sac_beta2,
            alpha_beta1: self.sac_alpha_beta1,
            alpha_beta2: self.sac_alpha_beta2,
            log_std_min: self.sac_log_std_min,
            log_std_max: self.sac_log_std_max,
            batch_size: self.sac_batch_size,
            hidden_dim: self.sac_hidden_dim,
            hidden_layers: self.sac_hidden_layers,
        }
    }

    pub fn dqn_hyper(&self) -> DqnHyper {
        DqnHyper {
            gamma: self.dqn_gamma,
            lr: self.dqn_lr,
            batch_size: self.dqn_batch_size,
            target_update_every: self.dqn_target_update_every,
            epsilon_start: self.dqn_epsilon_start,
            epsilon_end: self.dqn_epsilon_end,
            epsilon_fraction: self.dqn_epsilon_fraction,
            hidden_dim: self.dqn_hidden_dim,
            hidden_layers: self.dqn_hidden_layers,
        }
    }

    pub fn input_shape(&self) -> InputShape {
        if self.mode.is_pixel() {
            // Frames reach the encoder on the translated canvas.
            return InputShape::Frame(self.env_config().frame_size() + self.augment_pad);
        }
        let full = match self.env {
            EnvId::Pendulum => 3,
            EnvId::DotCatch => 4,
        };
        match self.mode.obs_mode() {
            crate::envs::ObsMode::Full => InputShape::Vector(full),
            _ => InputShape::Vector(full - 1),
        }
    }

    /// Training-time translation, or `None` when disabled.
    pub fn translate_spec(&self) -> Result<Option<TranslateSpec>, HarnessError> {
        if !self.mode.is_pixel() || self.augment_pad == 0 {
            return Ok(None);
        }
        let size = self.env_config().frame_size();
        Ok(Some(TranslateSpec::new(size, size + self.augment_pad)?))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!(
                "run name `{}` must be a plain, non-empty file name",
                self.name
            ));
        }
        if self.total_steps == 0
            || self.eval_interval == 0
            || self.eval_episodes == 0
            || self.action_repeat == 0
        {
            return bad(
                "total steps, eval interval, eval episodes and action repeat must be positive"
                    .into(),
            );
        }
        if self.replay_capacity == 0 || self.frames == 0 {
            return bad("replay capacity and frame count must be positive".into());
        }
        match (self.env, self.learner) {
            (EnvId::Pendulum, Learner::Sac) | (EnvId::DotCatch, Learner::Dqn) => {}
            (env, learner) => {
                return bad(format!(
                    "learner {learner:?} does not fit environment {env:?}"
                ))
            }
        }
        if self.env == EnvId::DotCatch
            && (self.dot_drift_speeds.is_empty() || self.dot_cols < 2 || self.dot_rows < 2)
        {
            return bad("dot-catch needs a grid of at least 2x2 and one drift speed".into());
        }
        if self.env == EnvId::Pendulum
            && !(self.pendulum_dt > 0.0 && self.pendulum_length > 0.0 && self.pendulum_mass > 0.0)
        {
            return bad("pendulum dt, length and mass must be positive".into());
        }
        if self.sac_updates_per_step == 0 {
            return bad("sac updates per step must be positive".into());
        }
        if self.dqn_update_every == 0 {
            return bad("dqn update period must be positive".into());
        }
        self.sac_hyper().validate()?;
        self.dqn_hyper().validate()?;
        crate::representation::Representation::new(
            self.mode,
            self.frames,
            self.input_shape(),
            &self.encoder_spec(),
        )?;
        self.translate_spec()?;
        Ok(())
    }
}

fn load_table(path: &Path, depth: usize) -> Result<toml::Table, HarnessError> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(HarnessError::Config(format!(
            "include nesting too deep at {}",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(HarnessError::Config(format!(
                    "include entries must be strings, got {other}"
                ))),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => {
            return Err(HarnessError::Config(format!(
                "include must be a string or array, got {other}"
            )))
        }
    };
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut merged = toml::Table::new();
    for inc in includes {
        merged.extend(load_table(&base.join(inc), depth + 1)?);
    }
    merged.extend(table);
    Ok(merged)
}
