use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, Environment, Frame, ObsMode, Observation, StepResult};

/// Grid geometry for the falling-dot task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DotCatchConfig {
    pub cols: usize,
    pub rows: usize,
    pub paddle_width: usize,
    /// Horizontal drift speeds, cells per step; one is drawn per episode.
    pub drift_speeds: Vec<i64>,
    pub cell_pixels: usize,
}

impl Default for DotCatchConfig {
    fn default() -> Self {
        Self {
            cols: 8,
            rows: 8,
            paddle_width: 1,
            drift_speeds: vec![-2, -1, 1, 2],
            cell_pixels: 2,
        }
    }
}

impl DotCatchConfig {
    pub fn frame_size(&self) -> usize {
        self.cell_pixels * self.cols.max(self.rows)
    }

    fn max_speed(&self) -> f64 {
        self.drift_speeds
            .iter()
            .map(|v| v.unsigned_abs())
            .max()
            .unwrap_or(1)
            .max(1) as f64
    }
}

/// Dot position and drift in cells; the paddle sits on the bottom row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DotCatchState {
    pub dot_x: i64,
    pub dot_y: i64,
    pub dot_vx: i64,
    pub paddle_x: i64,
}

impl DotCatchState {
    pub fn caught(&self, cfg: &DotCatchConfig) -> bool {
        self.dot_x >= self.paddle_x && self.dot_x < self.paddle_x + cfg.paddle_width as i64
    }

    /// Paddle move `action` in {0: left, 1: stay, 2: right}, then the dot
    /// falls one row and drifts, reflecting off the side walls.
    pub fn advance(&self, cfg: &DotCatchConfig, action: usize) -> Self {
        let max_paddle = (cfg.cols - cfg.paddle_width) as i64;
        let paddle_x = (self.paddle_x + action as i64 - 1).clamp(0, max_paddle);
        let right = cfg.cols as i64 - 1;
        let (mut x, mut vx) = (self.dot_x + self.dot_vx, self.dot_vx);
        if x < 0 {
            x = -x;
            vx = -vx;
        } else if x > right {
            x = 2 * right - x;
            vx = -vx;
        }
        Self {
            dot_x: x.clamp(0, right),
            dot_y: self.dot_y + 1,
            dot_vx: vx,
            paddle_x,
        }
    }

    pub fn full(&self, cfg: &DotCatchConfig) -> Vec<f64> {
        let mut v = self.position(cfg);
        v.insert(2, self.dot_vx as f64 / cfg.max_speed());
        v
    }

    pub fn position(&self, cfg: &DotCatchConfig) -> Vec<f64> {
        let w = (cfg.cols - 1).max(1) as f64;
        let h = (cfg.rows - 1).max(1) as f64;
        vec![
            self.dot_x as f64 / w,
            self.dot_y as f64 / h,
            self.paddle_x as f64 / w,
        ]
    }

    /// Dot and paddle drawn as filled cells.
    pub fn render(&self, cfg: &DotCatchConfig) -> Frame {
        let size = cfg.frame_size();
        assert!(size >= 16, "frame size must be at least 16");
        let c = cfg.cell_pixels;
        let mut frame = Frame::new(size, size);
        let mut fill = |cx: i64, cy: i64| {
            for r in 0..c {
                for q in 0..c {
                    frame.set(cy as usize * c + r, cx as usize * c + q, 1.0);
                }
            }
        };
        fill(self.dot_x, self.dot_y.min(cfg.rows as i64 - 1));
        for k in 0..cfg.paddle_width as i64 {
            fill(self.paddle_x + k, cfg.rows as i64 - 1);
        }
        frame
    }
}

/// Catch a drifting dot with a paddle; one reward on a catch.
#[derive(Clone, Debug)]
pub struct DotCatch {
    cfg: DotCatchConfig,
    mode: ObsMode,
    state: DotCatchState,
}

impl DotCatch {
    pub fn new(cfg: DotCatchConfig, mode: ObsMode) -> Self {
        let state = DotCatchState {
            dot_x: 0,
            dot_y: 0,
            dot_vx: 0,
            paddle_x: ((cfg.cols - cfg.paddle_width) / 2) as i64,
        };
        Self { cfg, mode, state }
    }

    pub fn state(&self) -> DotCatchState {
        self.state
    }

    pub fn set_state(&mut self, state: DotCatchState) {
        self.state = state;
    }

    pub fn config(&self) -> &DotCatchConfig {
        &self.cfg
    }
}

impl Environment for DotCatch {
    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speeds = &self.cfg.drift_speeds;
        self.state = DotCatchState {
            dot_x: rng.gen_range(0..self.cfg.cols) as i64,
            dot_y: 0,
            dot_vx: if speeds.is_empty() {
                0
            } else {
                speeds[rng.gen_range(0..speeds.len())]
            },
            paddle_x: ((self.cfg.cols - self.cfg.paddle_width) / 2) as i64,
        };
        self.observe(self.mode)
    }

    fn step(&mut self, action: &Action) -> StepResult {
        let (a, clamped) = match action {
            Action::Discrete(a) if *a < 3 => (*a, false),
            Action::Discrete(_) => (2, true),
            Action::Continuous(_) => (1, true),
        };
        self.state = self.state.advance(&self.cfg, a);
        let landed = self.state.dot_y >= self.cfg.rows as i64 - 1;
        let caught = landed && self.state.caught(&self.cfg);
        let mut info = BTreeMap::new();
        info.insert("action_clamped".to_string(), f64::from(clamped));
        if landed {
            info.insert("caught".to_string(), f64::from(caught));
        }
        StepResult {
            observation: self.observe(self.mode),
            reward: f64::from(caught),
            done: landed,
            terminal: landed,
            info,
        }
    }

    fn observe(&self, mode: ObsMode) -> Observation {
        match mode {
            ObsMode::Full => Observation::FullState(self.state.full(&self.cfg)),
            ObsMode::PositionOnly => Observation::PositionOnly(self.state.position(&self.cfg)),
            ObsMode::Pixels => Observation::Pixels(self.state.render(&self.cfg)),
        }
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { n: 3 }
    }

    fn obs_mode(&self) -> ObsMode {
        self.mode
    }

    fn horizon(&self) -> usize {
        self.cfg.rows - 1
    }
}
