//! Desk-scale environments with known target reward functions.

mod keydoor;
mod pointmass;

pub use keydoor::{scripted_action, GridPos, KeyDoorConfig, KeyDoorGrid, KeyDoorMove};
pub use pointmass::{PointMass, PointMassConfig};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f32, high: f32 },
}

impl ActionSpace {
    /// Width of the action encoding fed to networks.
    pub fn encoding_dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Continuous { dim, .. } => *dim,
        }
    }

    pub fn num_discrete(&self) -> Option<usize> {
        match self {
            ActionSpace::Discrete(n) => Some(*n),
            ActionSpace::Continuous { .. } => None,
        }
    }

    /// One-hot for discrete actions, the raw vector for continuous ones.
    pub fn encode(&self, action: &Action) -> Vec<f32> {
        match (self, action) {
            (ActionSpace::Discrete(n), Action::Discrete(i)) => {
                let mut v = vec![0.0; *n];
                if *i < *n {
                    v[*i] = 1.0;
                }
                v
            }
            (_, Action::Continuous(v)) => v.clone(),
            (ActionSpace::Continuous { dim, .. }, Action::Discrete(_)) => vec![0.0; *dim],
        }
    }

    /// Inverse of [`ActionSpace::encode`]; discrete encodings decode by argmax.
    pub fn decode(&self, encoding: &[f32]) -> Action {
        match self {
            ActionSpace::Discrete(_) => Action::Discrete(argmax(encoding)),
            ActionSpace::Continuous { .. } => Action::Continuous(encoding.to_vec()),
        }
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub observation: Vec<f32>,
    pub done: bool,
    pub step_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub target_reward: f32,
    /// True environment termination (goal reached), as opposed to the
    /// horizon cut-off which only sets `state.done`.
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub label: String,
    pub x: f32,
    pub y: f32,
}

/// Serializable rendering of an environment state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Frame {
    Grid {
        size: usize,
        agent: GridPos,
        key: Option<GridPos>,
        door: GridPos,
        has_key: bool,
        walls: Vec<GridPos>,
    },
    Points {
        points: Vec<LabeledPoint>,
    },
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvState;

    fn step(&mut self, action: &Action) -> Result<StepOutcome>;

    fn state(&self) -> EnvState;

    /// Target reward `r(s, a, s')` from observations.
    fn target_reward(&self, obs: &[f32], action: &Action, next_obs: &[f32]) -> f32;

    fn render(&self) -> Frame;

    /// Restores the environment to the state shown in `frame`.
    fn restore(&mut self, frame: &Frame, step_index: usize) -> Result<()>;

    /// Renders a stored observation without touching the live state.
    fn frame_from_observation(&self, obs: &[f32]) -> Result<Frame>;

    /// Whether the current episode has reached the task goal.
    fn success(&self) -> bool;

    /// Stable key of a discretised observation, used by count-based
    /// exploration.
    fn state_key(&self, obs: &[f32]) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for &x in obs {
            ((x * 100.0).round() as i64).hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvConfig {
    #[serde(rename = "keydoor")]
    KeyDoor(KeyDoorConfig),
    #[serde(rename = "pointmass")]
    PointMass(PointMassConfig),
}

impl EnvConfig {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "keydoor" => Ok(EnvConfig::KeyDoor(KeyDoorConfig::default())),
            "pointmass" => Ok(EnvConfig::PointMass(PointMassConfig::default())),
            other => Err(crate::Error::Config(format!("unknown environment {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::KeyDoor(_) => "keydoor",
            EnvConfig::PointMass(_) => "pointmass",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::KeyDoor(c) => Box::new(KeyDoorGrid::new(c.clone())?),
            EnvConfig::PointMass(c) => Box::new(PointMass::new(c.clone())?),
        })
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvConfig::KeyDoor(c) => c.horizon,
            EnvConfig::PointMass(c) => c.horizon,
        }
    }
}
