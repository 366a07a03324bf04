//! Deterministic desk-scale environments with full-state, position-only and
//! pixel observations.
//!
//! Both tasks are built so that a single observation carries positions but
//! no velocities: two states that differ only in velocity render to the same
//! frame and the same position-only vector.

mod dot_catch;
mod pendulum;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use dot_catch::{DotCatch, DotCatchConfig, DotCatchState};
pub use pendulum::{Pendulum, PendulumConfig, PendulumState};

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_size(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// An ordered window of frames, oldest first.
pub type FrameStack = Vec<Arc<Frame>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    Full,
    PositionOnly,
    Pixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    FullState(Vec<f64>),
    PositionOnly(Vec<f64>),
    Pixels(Frame),
}

impl Observation {
    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Observation::FullState(v) | Observation::PositionOnly(v) => Some(v),
            Observation::Pixels(_) => None,
        }
    }

    pub fn as_frame(&self) -> Option<&Frame> {
        match self {
            Observation::Pixels(f) => Some(f),
            _ => None,
        }
    }

    /// Approximate heap footprint, used for memory accounting.
    pub fn byte_size(&self) -> usize {
        match self {
            Observation::FullState(v) | Observation::PositionOnly(v) => v.len() * 8,
            Observation::Pixels(f) => f.data.len() * 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    /// Box `[-1, 1]^dim`.
    Continuous {
        dim: usize,
    },
    Discrete {
        n: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    /// The episode is over (terminal state or horizon reached).
    pub done: bool,
    /// The episode ended in a true terminal state; bootstrapping stops here.
    pub terminal: bool,
    pub info: BTreeMap<String, f64>,
}

pub trait Environment: Send {
    /// Starts a new episode from the configured initial distribution.
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: &Action) -> StepResult;
    fn observe(&self, mode: ObsMode) -> Observation;
    fn action_space(&self) -> ActionSpace;
    fn obs_mode(&self) -> ObsMode;
    fn horizon(&self) -> usize;
}

/// Environment selection with its physics constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Pendulum(PendulumConfig),
    DotCatch(DotCatchConfig),
}

impl EnvConfig {
    pub fn build(&self, mode: ObsMode) -> Box<dyn Environment> {
        match self {
            EnvConfig::Pendulum(c) => Box::new(Pendulum::new(c.clone(), mode)),
            EnvConfig::DotCatch(c) => Box::new(DotCatch::new(c.clone(), mode)),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            EnvConfig::Pendulum(_) => "pendulum",
            EnvConfig::DotCatch(_) => "dot_catch",
        }
    }

    pub fn frame_size(&self) -> usize {
        match self {
            EnvConfig::Pendulum(c) => c.frame_size,
            EnvConfig::DotCatch(c) => c.frame_size(),
        }
    }
}
