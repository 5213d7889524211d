use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, EnvSpec, EnvState, Environment, Frame, LabeledPoint, StepOutcome};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMassConfig {
    pub goal: [f32; 2],
    /// Fixed start; `None` samples uniformly inside the bounds.
    pub start: Option<[f32; 2]>,
    /// Positions are clamped to `[-bound, bound]^2`.
    pub bound: f32,
    pub max_step: f32,
    pub horizon: usize,
    /// Distance under which the episode counts as a success.
    pub success_radius: f32,
    /// Expose a 9-way discretisation of the action box instead of the
    /// continuous action space.
    pub discrete_actions: bool,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        PointMassConfig {
            goal: [0.5, 0.5],
            start: None,
            bound: 1.0,
            max_step: 0.1,
            horizon: 100,
            success_radius: 0.1,
            discrete_actions: false,
        }
    }
}

/// 2-D point pushed by bounded displacements; reward is minus the distance
/// to the goal. Observation is `[px, py, gx, gy]`.
#[derive(Clone, Debug)]
pub struct PointMass {
    config: PointMassConfig,
    spec: EnvSpec,
    pos: [f32; 2],
    done: bool,
    reached: bool,
    step_index: usize,
}

/// Reward for landing at `next` with goal `goal`.
pub fn point_reward(next: [f32; 2], goal: [f32; 2]) -> f32 {
    -((next[0] - goal[0]).powi(2) + (next[1] - goal[1]).powi(2)).sqrt()
}

impl PointMass {
    pub fn new(config: PointMassConfig) -> Result<Self> {
        if !(config.bound > 0.0 && config.max_step > 0.0) || config.horizon == 0 {
            return Err(Error::Config("point mass needs positive bound, step and horizon".into()));
        }
        let action_space = if config.discrete_actions {
            ActionSpace::Discrete(9)
        } else {
            ActionSpace::Continuous { dim: 2, low: -config.max_step, high: config.max_step }
        };
        let spec = EnvSpec { name: "pointmass".into(), obs_dim: 4, action_space, horizon: config.horizon };
        let pos = config.start.unwrap_or([0.0, 0.0]);
        Ok(PointMass { config, spec, pos, done: false, reached: false, step_index: 0 })
    }

    pub fn position(&self) -> [f32; 2] {
        self.pos
    }

    /// Displacement for an action, validating bounds.
    pub fn displacement(&self, action: &Action) -> Result<[f32; 2]> {
        let s = self.config.max_step;
        match (action, self.config.discrete_actions) {
            (Action::Discrete(i), true) if *i < 9 => {
                let (dx, dy) = ((*i % 3) as f32 - 1.0, (*i / 3) as f32 - 1.0);
                Ok([dx * s, dy * s])
            }
            (Action::Discrete(i), true) => Err(Error::Action(format!("point mass action {i} out of range 0..9"))),
            (Action::Continuous(v), false) => {
                if v.len() != 2 {
                    return Err(Error::Action(format!("point mass action needs 2 values, got {}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite() || x.abs() > s) {
                    return Err(Error::Action(format!("point mass action {v:?} outside [-{s}, {s}]")));
                }
                Ok([v[0], v[1]])
            }
            _ => Err(Error::Action("action kind does not match the point mass action space".into())),
        }
    }

    fn observe(&self) -> Vec<f32> {
        vec![self.pos[0], self.pos[1], self.config.goal[0], self.config.goal[1]]
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvState {
        let b = self.config.bound;
        self.pos = self.config.start.unwrap_or_else(|| [rng.gen_range(-b..b), rng.gen_range(-b..b)]);
        self.done = false;
        self.reached = false;
        self.step_index = 0;
        self.state()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Episode("step called on a finished episode".into()));
        }
        let d = self.displacement(action)?;
        let before = self.observe();
        let b = self.config.bound;
        self.pos = [(self.pos[0] + d[0]).clamp(-b, b), (self.pos[1] + d[1]).clamp(-b, b)];
        self.step_index += 1;
        self.done = self.step_index >= self.config.horizon;
        let state = self.state();
        let target_reward = self.target_reward(&before, action, &state.observation);
        if -target_reward < self.config.success_radius {
            self.reached = true;
        }
        Ok(StepOutcome { state, target_reward, terminal: false })
    }

    fn state(&self) -> EnvState {
        EnvState { observation: self.observe(), done: self.done, step_index: self.step_index }
    }

    fn target_reward(&self, _obs: &[f32], _action: &Action, next_obs: &[f32]) -> f32 {
        point_reward([next_obs[0], next_obs[1]], [next_obs[2], next_obs[3]])
    }

    fn render(&self) -> Frame {
        points(self.pos, self.config.goal)
    }

    fn restore(&mut self, frame: &Frame, step_index: usize) -> Result<()> {
        let Frame::Points { points } = frame else {
            return Err(Error::Config("point mass cannot restore a grid frame".into()));
        };
        let agent = points.iter().find(|p| p.label == "agent").ok_or_else(|| Error::Config("frame has no agent point".into()))?;
        self.pos = [agent.x, agent.y];
        self.step_index = step_index.min(self.config.horizon);
        self.done = self.step_index >= self.config.horizon;
        self.reached = false;
        Ok(())
    }

    fn frame_from_observation(&self, obs: &[f32]) -> Result<Frame> {
        if obs.len() != 4 {
            return Err(Error::Shape(format!("point mass observation needs 4 values, got {}", obs.len())));
        }
        Ok(points([obs[0], obs[1]], [obs[2], obs[3]]))
    }

    fn success(&self) -> bool {
        self.reached
    }
}

fn points(agent: [f32; 2], goal: [f32; 2]) -> Frame {
    Frame::Points {
        points: vec![
            LabeledPoint { label: "agent".into(), x: agent[0], y: agent[1] },
            LabeledPoint { label: "goal".into(), x: goal[0], y: goal[1] },
        ],
    }
}
