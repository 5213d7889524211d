use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, EnvSpec, EnvState, Environment, Frame, StepOutcome};
use crate::error::{Error, Result};

/// Grid coordinate `[x, y]`; `y` grows downwards.
pub type GridPos = [usize; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyDoorMove {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl KeyDoorMove {
    pub const ALL: [KeyDoorMove; 4] = [KeyDoorMove::Up, KeyDoorMove::Down, KeyDoorMove::Left, KeyDoorMove::Right];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            KeyDoorMove::Up => (0, -1),
            KeyDoorMove::Down => (0, 1),
            KeyDoorMove::Left => (-1, 0),
            KeyDoorMove::Right => (1, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyDoorConfig {
    pub size: usize,
    pub key: GridPos,
    pub door: GridPos,
    /// Fixed start cell; `None` samples a free cell on every reset.
    pub start: Option<GridPos>,
    pub walls: Vec<GridPos>,
    pub horizon: usize,
}

impl Default for KeyDoorConfig {
    fn default() -> Self {
        KeyDoorConfig { size: 7, key: [0, 6], door: [6, 0], start: None, walls: Vec::new(), horizon: 100 }
    }
}

/// N x N grid: collect the key, then enter the door.
///
/// Observation: one-hot agent cell, has-key bit, one-hot key cell (all zero
/// once collected), one-hot door cell.
#[derive(Clone, Debug)]
pub struct KeyDoorGrid {
    config: KeyDoorConfig,
    spec: EnvSpec,
    agent: GridPos,
    has_key: bool,
    done: bool,
    reached_door: bool,
    step_index: usize,
}

impl KeyDoorGrid {
    pub fn new(config: KeyDoorConfig) -> Result<Self> {
        let n = config.size;
        if n < 2 {
            return Err(Error::Config("grid size must be at least 2".into()));
        }
        let inside = |p: &GridPos| p[0] < n && p[1] < n;
        if !inside(&config.key) || !inside(&config.door) || !config.walls.iter().all(inside) {
            return Err(Error::Config("grid layout has cells outside the grid".into()));
        }
        if config.key == config.door || config.walls.contains(&config.key) || config.walls.contains(&config.door) {
            return Err(Error::Config("key, door and walls must occupy distinct cells".into()));
        }
        if let Some(s) = config.start {
            if !inside(&s) || config.walls.contains(&s) || s == config.door || s == config.key {
                return Err(Error::Config("start cell must be a free cell".into()));
            }
        }
        if config.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let spec = EnvSpec {
            name: "keydoor".into(),
            obs_dim: 3 * n * n + 1,
            action_space: ActionSpace::Discrete(4),
            horizon: config.horizon,
        };
        let start = config.start.unwrap_or_else(|| first_free(&config));
        Ok(KeyDoorGrid { config, spec, agent: start, has_key: false, done: false, reached_door: false, step_index: 0 })
    }

    pub fn config(&self) -> &KeyDoorConfig {
        &self.config
    }

    pub fn agent(&self) -> GridPos {
        self.agent
    }

    pub fn has_key(&self) -> bool {
        self.has_key
    }

    fn cell(&self, p: GridPos) -> usize {
        p[1] * self.config.size + p[0]
    }

    pub fn observe(&self, agent: GridPos, has_key: bool) -> Vec<f32> {
        let nn = self.config.size * self.config.size;
        let mut obs = vec![0.0; 3 * nn + 1];
        obs[self.cell(agent)] = 1.0;
        obs[nn] = if has_key { 1.0 } else { 0.0 };
        if !has_key {
            obs[nn + 1 + self.cell(self.config.key)] = 1.0;
        }
        obs[2 * nn + 1 + self.cell(self.config.door)] = 1.0;
        obs
    }

    /// Decodes `(agent, has_key)` from an observation.
    pub fn decode(&self, obs: &[f32]) -> Result<(GridPos, bool)> {
        let n = self.config.size;
        if obs.len() != self.spec.obs_dim {
            return Err(Error::Shape(format!("keydoor observation needs {} values, got {}", self.spec.obs_dim, obs.len())));
        }
        let cell = super::argmax(&obs[..n * n]);
        Ok(([cell % n, cell / n], obs[n * n] > 0.5))
    }

    fn blocked(&self, p: GridPos) -> bool {
        self.config.walls.contains(&p)
    }

    fn free_cells(&self) -> Vec<GridPos> {
        free_cells(&self.config)
    }
}

fn free_cells(c: &KeyDoorConfig) -> Vec<GridPos> {
    let mut cells = Vec::new();
    for y in 0..c.size {
        for x in 0..c.size {
            let p = [x, y];
            if p != c.key && p != c.door && !c.walls.contains(&p) {
                cells.push(p);
            }
        }
    }
    cells
}

fn first_free(c: &KeyDoorConfig) -> GridPos {
    free_cells(c).first().copied().unwrap_or([0, 0])
}

impl Environment for KeyDoorGrid {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> EnvState {
        self.agent = match self.config.start {
            Some(s) => s,
            None => {
                let cells = self.free_cells();
                cells[rng.gen_range(0..cells.len())]
            }
        };
        self.has_key = false;
        self.done = false;
        self.reached_door = false;
        self.step_index = 0;
        self.state()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Episode("step called on a finished episode".into()));
        }
        let mv = match action {
            Action::Discrete(i) => KeyDoorMove::from_index(*i).ok_or_else(|| Error::Action(format!("grid action {i} out of range 0..4")))?,
            Action::Continuous(_) => return Err(Error::Action("grid world takes discrete actions".into())),
        };
        let before = self.observe(self.agent, self.has_key);
        let mut terminal = false;
        if self.agent == self.config.door && self.has_key {
            // Already standing on the door with the key: any action finishes.
            terminal = true;
        } else {
            let (dx, dy) = mv.delta();
            let (nx, ny) = (self.agent[0] as isize + dx, self.agent[1] as isize + dy);
            let n = self.config.size as isize;
            if (0..n).contains(&nx) && (0..n).contains(&ny) && !self.blocked([nx as usize, ny as usize]) {
                self.agent = [nx as usize, ny as usize];
            }
            if self.agent == self.config.key {
                self.has_key = true;
            }
            if self.agent == self.config.door && self.has_key {
                terminal = true;
            }
        }
        self.step_index += 1;
        self.reached_door |= terminal;
        self.done = terminal || self.step_index >= self.config.horizon;
        let state = self.state();
        let target_reward = self.target_reward(&before, action, &state.observation);
        Ok(StepOutcome { state, target_reward, terminal })
    }

    fn state(&self) -> EnvState {
        EnvState { observation: self.observe(self.agent, self.has_key), done: self.done, step_index: self.step_index }
    }

    fn target_reward(&self, _obs: &[f32], _action: &Action, next_obs: &[f32]) -> f32 {
        match self.decode(next_obs) {
            Ok((agent, has_key)) if has_key && agent == self.config.door => 1.0,
            _ => 0.0,
        }
    }

    fn render(&self) -> Frame {
        Frame::Grid {
            size: self.config.size,
            agent: self.agent,
            key: (!self.has_key).then_some(self.config.key),
            door: self.config.door,
            has_key: self.has_key,
            walls: self.config.walls.clone(),
        }
    }

    fn restore(&mut self, frame: &Frame, step_index: usize) -> Result<()> {
        let Frame::Grid { size, agent, has_key, .. } = frame else {
            return Err(Error::Config("keydoor cannot restore a point frame".into()));
        };
        if *size != self.config.size || agent[0] >= *size || agent[1] >= *size || self.blocked(*agent) {
            return Err(Error::Config("frame does not fit this grid".into()));
        }
        self.agent = *agent;
        self.has_key = *has_key;
        self.step_index = step_index.min(self.config.horizon);
        self.reached_door = false;
        self.done = self.step_index >= self.config.horizon;
        Ok(())
    }

    fn frame_from_observation(&self, obs: &[f32]) -> Result<Frame> {
        let (agent, has_key) = self.decode(obs)?;
        Ok(Frame::Grid {
            size: self.config.size,
            agent,
            key: (!has_key).then_some(self.config.key),
            door: self.config.door,
            has_key,
            walls: self.config.walls.clone(),
        })
    }

    fn success(&self) -> bool {
        self.reached_door
    }

    fn state_key(&self, obs: &[f32]) -> u64 {
        match self.decode(obs) {
            Ok((a, k)) => (self.cell(a) as u64) * 2 + k as u64,
            Err(_) => u64::MAX,
        }
    }
}

/// Shortest-path policy: walk to the key, then to the door (no walls).
pub fn scripted_action(env: &KeyDoorGrid) -> usize {
    let target = if env.has_key() { env.config().door } else { env.config().key };
    let a = env.agent();
    let mv = if a[0] < target[0] {
        KeyDoorMove::Right
    } else if a[0] > target[0] {
        KeyDoorMove::Left
    } else if a[1] < target[1] {
        KeyDoorMove::Down
    } else {
        KeyDoorMove::Up
    };
    mv as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid5() -> KeyDoorGrid {
        KeyDoorGrid::new(KeyDoorConfig { size: 5, key: [1, 3], door: [4, 0], start: Some([0, 0]), walls: vec![], horizon: 100 }).unwrap()
    }

    #[test]
    fn render_initial_5x5() {
        let mut env = grid5();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(
            env.render(),
            Frame::Grid { size: 5, agent: [0, 0], key: Some([1, 3]), door: [4, 0], has_key: false, walls: vec![] }
        );
    }

    #[test]
    fn door_with_key_any_action_rewards_and_ends() {
        for a in 0..4 {
            let mut env = grid5();
            env.restore(&Frame::Grid { size: 5, agent: [4, 0], key: None, door: [4, 0], has_key: true, walls: vec![] }, 3).unwrap();
            let out = env.step(&Action::Discrete(a)).unwrap();
            assert_eq!(out.target_reward, 1.0);
            assert!(out.state.done && out.terminal);
            assert!(env.success());
        }
    }

    #[test]
    fn no_key_gives_zero_reward() {
        let mut env = grid5();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let out = env.step(&Action::Discrete(KeyDoorMove::Right as usize)).unwrap();
        assert_eq!(out.target_reward, 0.0);
        // Entering the door without the key is just a move.
        env.restore(&Frame::Grid { size: 5, agent: [3, 0], key: Some([1, 3]), door: [4, 0], has_key: false, walls: vec![] }, 0).unwrap();
        let out = env.step(&Action::Discrete(KeyDoorMove::Right as usize)).unwrap();
        assert_eq!(out.target_reward, 0.0);
        assert!(!out.state.done);
    }

    #[test]
    fn walls_and_edges_are_no_ops() {
        let mut env = KeyDoorGrid::new(KeyDoorConfig { size: 5, key: [1, 3], door: [4, 0], start: Some([0, 0]), walls: vec![[1, 0]], horizon: 100 }).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let out = env.step(&Action::Discrete(KeyDoorMove::Up as usize)).unwrap();
        assert_eq!(env.agent(), [0, 0]);
        assert_eq!(out.target_reward, 0.0);
        env.step(&Action::Discrete(KeyDoorMove::Right as usize)).unwrap();
        assert_eq!(env.agent(), [0, 0]);
    }

    #[test]
    fn errors_on_bad_action_and_finished_episode() {
        let mut env = grid5();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(env.step(&Action::Discrete(4)), Err(Error::Action(_))));
        assert!(matches!(env.step(&Action::Continuous(vec![0.0, 0.0])), Err(Error::Action(_))));
        let mut env = KeyDoorGrid::new(KeyDoorConfig { horizon: 1, ..KeyDoorConfig::default() }).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        env.step(&Action::Discrete(0)).unwrap();
        assert!(matches!(env.step(&Action::Discrete(0)), Err(Error::Episode(_))));
    }

    #[test]
    fn scripted_policy_scores_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut env = KeyDoorGrid::new(KeyDoorConfig::default()).unwrap();
            env.reset(&mut rng);
            let mut ret = 0.0f32;
            while !env.state().done {
                ret += env.step(&Action::Discrete(scripted_action(&env))).unwrap().target_reward;
            }
            assert_eq!(ret, 1.0);
            assert!(env.success());
        }
    }

    fn arb_state() -> impl Strategy<Value = (GridPos, bool, usize)> {
        (0usize..7, 0usize..7, any::<bool>(), 0usize..4)
            .prop_filter("agent off door", |(x, y, _, _)| [*x, *y] != [6, 0])
            .prop_map(|(x, y, k, a)| ([x, y], k, a))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn render_step_restore_round_trip((agent, has_key, action) in arb_state()) {
            let mut live = KeyDoorGrid::new(KeyDoorConfig::default()).unwrap();
            let frame = Frame::Grid { size: 7, agent, key: (!has_key).then_some([0, 6]), door: [6, 0], has_key, walls: vec![] };
            live.restore(&frame, 5).unwrap();
            prop_assert_eq!(live.render(), frame.clone());
            // Observation rendering agrees with the live render.
            prop_assert_eq!(live.frame_from_observation(&live.state().observation).unwrap(), frame);

            let mut replay = KeyDoorGrid::new(KeyDoorConfig::default()).unwrap();
            replay.restore(&live.render(), 5).unwrap();
            let a = live.step(&Action::Discrete(action)).unwrap();
            let b = replay.step(&Action::Discrete(action)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(live.render(), replay.render());
            prop_assert_eq!(live.frame_from_observation(&a.state.observation).unwrap(), live.render());

            // The only rewarded transition is entering the door with the key.
            let (next_agent, next_key) = live.decode(&a.state.observation).unwrap();
            let entered = next_key && next_agent == [6, 0];
            prop_assert_eq!(a.target_reward, if entered { 1.0 } else { 0.0 });
        }
    }
}
