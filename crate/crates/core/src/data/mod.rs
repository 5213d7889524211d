//! Trajectory segments, the agent replay buffer, the preference dataset and
//! disagreement-based query selection.

mod buffer;
mod dataset;
mod query;

pub use buffer::{ReplayBuffer, Transition};
pub use dataset::{PreferenceDataset, PreferenceTriplet};
pub use query::{disagreement, relabel, sample_candidate_pairs, select_queries};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-length slice of one stored episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub states: Vec<Vec<f32>>,
    /// Network encoding of each action (one-hot for discrete spaces).
    pub actions: Vec<Vec<f32>>,
    /// Ground-truth rewards; read only by oracles and metrics.
    pub target_rewards: Vec<f32>,
    pub source_episode: u64,
    /// Step index of the first transition within its episode.
    pub start_index: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn target_return(&self) -> f64 {
        self.target_rewards.iter().map(|&r| r as f64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.states.len();
        if self.actions.len() != l || self.target_rewards.len() != l {
            return Err(Error::Data(format!(
                "segment lists differ in length: {} states, {} actions, {} rewards",
                l,
                self.actions.len(),
                self.target_rewards.len()
            )));
        }
        Ok(())
    }

    /// Row-major `[len, obs_dim + act_dim]` matrix of concatenated inputs.
    pub fn inputs(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len() * (self.states[0].len() + self.actions[0].len()));
        for (s, a) in self.states.iter().zip(&self.actions) {
            out.extend_from_slice(s);
            out.extend_from_slice(a);
        }
        out
    }
}

/// Soft preference label `(y_a, y_b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label(pub f32, pub f32);

impl Label {
    pub const A: Label = Label(1.0, 0.0);
    pub const B: Label = Label(0.0, 1.0);
    pub const EQUAL: Label = Label(0.5, 0.5);

    pub fn new(ya: f32, yb: f32) -> Result<Self> {
        let l = Label(ya, yb);
        if l == Label::A || l == Label::B || l == Label::EQUAL {
            Ok(l)
        } else {
            Err(Error::Data(format!("label ({ya}, {yb}) is not one of (1,0), (0,1), (0.5,0.5)")))
        }
    }

    pub fn swapped(self) -> Label {
        Label(self.1, self.0)
    }

    pub fn from_choice(choice: &str) -> Result<Self> {
        match choice {
            "a" => Ok(Label::A),
            "b" => Ok(Label::B),
            "equal" => Ok(Label::EQUAL),
            other => Err(Error::Data(format!("unknown choice {other:?}"))),
        }
    }
}
