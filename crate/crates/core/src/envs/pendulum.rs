use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, Environment, Frame, ObsMode, Observation, StepResult};

/// Physics and rendering constants. The angle is measured from the upright
/// position, so `theta = 0` is balanced on top and `theta = pi` hangs down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumConfig {
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub max_torque: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub horizon: usize,
    pub reward_cos_threshold: f64,
    /// Half-width of the uniform reset noise on the angle, radians.
    pub init_angle_noise: f64,
    /// Half-width of the uniform reset noise on the angular velocity, rad/s.
    pub init_velocity_noise: f64,
    pub frame_size: usize,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            length: 0.25,
            mass: 1.0,
            max_torque: 1.625,
            dt: 0.02,
            max_speed: 20.0,
            horizon: 200,
            reward_cos_threshold: 0.95,
            init_angle_noise: 0.1,
            init_velocity_noise: 0.05,
            frame_size: 64,
        }
    }
}

impl PendulumConfig {
    /// Angular acceleration produced by gravity at `theta`.
    pub fn gravity_accel(&self, theta: f64) -> f64 {
        self.gravity / self.length * theta.sin()
    }

    /// Angular acceleration produced by the full-scale torque.
    pub fn torque_accel(&self) -> f64 {
        self.max_torque / (self.mass * self.length * self.length)
    }

    /// Mechanical energy per unit `m l^2`; potential peaks upright.
    pub fn energy(&self, state: &PendulumState) -> f64 {
        0.5 * state.theta_dot * state.theta_dot + self.gravity / self.length * state.theta.cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

impl PendulumState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
            theta_dot,
        }
    }

    /// One semi-implicit Euler step under normalized torque `u` in `[-1, 1]`.
    pub fn advance(&self, cfg: &PendulumConfig, u: f64) -> Self {
        let accel = cfg.gravity_accel(self.theta) + u * cfg.torque_accel();
        let theta_dot = (self.theta_dot + accel * cfg.dt).clamp(-cfg.max_speed, cfg.max_speed);
        Self {
            theta: wrap_angle(self.theta + theta_dot * cfg.dt),
            theta_dot,
        }
    }

    pub fn full(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    pub fn position(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin()]
    }

    /// Anti-aliased rod from the image center. Only the angle is drawn.
    pub fn render(&self, size: usize) -> Frame {
        assert!(size >= 16, "frame size must be at least 16");
        let s = size as f64;
        let (cx, cy) = (s / 2.0, s / 2.0);
        let rod = 0.42 * s;
        let half_width = (s / 40.0).max(0.75);
        let (tx, ty) = (cx + rod * self.theta.sin(), cy - rod * self.theta.cos());
        let (dx, dy) = (tx - cx, ty - cy);
        let len2 = dx * dx + dy * dy;
        let mut frame = Frame::new(size, size);
        for row in 0..size {
            for col in 0..size {
                let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                let t = (((px - cx) * dx + (py - cy) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (cx + t * dx - px, cy + t * dy - py);
                let dist = (qx * qx + qy * qy).sqrt();
                let coverage = (half_width + 0.5 - dist).clamp(0.0, 1.0);
                frame.set(row, col, coverage as f32);
            }
        }
        frame
    }
}

/// Sparse-reward swing-up task.
#[derive(Clone, Debug)]
pub struct Pendulum {
    cfg: PendulumConfig,
    mode: ObsMode,
    state: PendulumState,
    t: usize,
}

impl Pendulum {
    pub fn new(cfg: PendulumConfig, mode: ObsMode) -> Self {
        Self {
            cfg,
            mode,
            state: PendulumState::new(PI, 0.0),
            t: 0,
        }
    }

    pub fn config(&self) -> &PendulumConfig {
        &self.cfg
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    pub fn set_state(&mut self, state: PendulumState) {
        self.state = state;
    }
}

impl Environment for Pendulum {
    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = self.cfg.init_angle_noise;
        let v = self.cfg.init_velocity_noise;
        let theta = PI + if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let theta_dot = if v > 0.0 { rng.gen_range(-v..=v) } else { 0.0 };
        self.state = PendulumState::new(theta, theta_dot);
        self.t = 0;
        self.observe(self.mode)
    }

    fn step(&mut self, action: &Action) -> StepResult {
        let raw = match action {
            Action::Continuous(v) if !v.is_empty() => v[0],
            _ => f64::NAN,
        };
        let u = if raw.is_finite() {
            raw.clamp(-1.0, 1.0)
        } else {
            0.0
        };
        let mut info = BTreeMap::new();
        info.insert("action_clamped".to_string(), f64::from(u != raw));
        self.state = self.state.advance(&self.cfg, u);
        self.t += 1;
        let reward = f64::from(self.state.theta.cos() > self.cfg.reward_cos_threshold);
        info.insert("theta".to_string(), self.state.theta);
        StepResult {
            observation: self.observe(self.mode),
            reward,
            done: self.t >= self.cfg.horizon,
            terminal: false,
            info,
        }
    }

    fn observe(&self, mode: ObsMode) -> Observation {
        match mode {
            ObsMode::Full => Observation::FullState(self.state.full()),
            ObsMode::PositionOnly => Observation::PositionOnly(self.state.position()),
            ObsMode::Pixels => Observation::Pixels(self.state.render(self.cfg.frame_size)),
        }
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 1 }
    }

    fn obs_mode(&self) -> ObsMode {
        self.mode
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }
}
