use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Segment;
use crate::envs::Action;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub action: Action,
    pub action_encoding: Vec<f32>,
    pub target_reward: f32,
    /// Current learned-reward estimate for `(obs, action)`.
    pub reward_label: f32,
    pub next_obs: Vec<f32>,
    /// Environment termination; horizon truncation is not terminal.
    pub terminal: bool,
    pub episode: u64,
    pub step: usize,
}

/// FIFO ring of transitions tagged with their episode.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Transition> {
        self.items.iter_mut()
    }

    /// Uniform sample of `n` transition indices (with replacement).
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }

    /// Buffer positions at which a length-`l` window stays inside a single
    /// episode.
    pub fn segment_starts(&self, l: usize) -> Vec<usize> {
        if l == 0 || self.items.len() < l {
            return Vec::new();
        }
        (0..=self.items.len() - l)
            .filter(|&i| {
                let (a, b) = (&self.items[i], &self.items[i + l - 1]);
                a.episode == b.episode && b.step == a.step + l - 1
            })
            .collect()
    }

    pub fn segment(&self, start: usize, l: usize) -> Result<Segment> {
        if start + l > self.items.len() {
            return Err(Error::Data(format!("segment [{start}, {}) beyond buffer length {}", start + l, self.items.len())));
        }
        let slice: Vec<&Transition> = self.items.range(start..start + l).collect();
        if slice.iter().any(|t| t.episode != slice[0].episode) {
            return Err(Error::Data("segment would cross an episode boundary".into()));
        }
        Ok(Segment {
            states: slice.iter().map(|t| t.obs.clone()).collect(),
            actions: slice.iter().map(|t| t.action_encoding.clone()).collect(),
            target_rewards: slice.iter().map(|t| t.target_reward).collect(),
            source_episode: slice[0].episode,
            start_index: slice[0].step,
        })
    }

    /// Looks up a segment by provenance, if its transitions are still stored.
    pub fn find_segment(&self, episode: u64, start_index: usize, l: usize) -> Option<Segment> {
        let pos = self.items.iter().position(|t| t.episode == episode && t.step == start_index)?;
        self.segment(pos, l).ok().filter(|s| s.len() == l && self.items[pos + l - 1].step == start_index + l - 1)
    }

    /// Segments of length `l` covering the most recent stored transitions,
    /// each within one episode. Used to build world-model batches.
    pub fn sample_segments<R: Rng>(&self, rng: &mut R, n: usize, l: usize) -> Result<Vec<Segment>> {
        let starts = self.segment_starts(l);
        if starts.is_empty() {
            return Err(Error::Data(format!("no stored episode has {l} consecutive steps")));
        }
        (0..n).map(|_| self.segment(starts[rng.gen_range(0..starts.len())], l)).collect()
    }
}

#[cfg(test)]
pub(crate) fn toy_episode(buffer: &mut ReplayBuffer, episode: u64, len: usize, reward_at: Option<usize>) {
    for step in 0..len {
        let x = step as f32 / len as f32;
        buffer.push(Transition {
            obs: vec![x, episode as f32],
            action: Action::Discrete(step % 2),
            action_encoding: if step % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] },
            target_reward: if reward_at == Some(step) { 1.0 } else { 0.0 },
            reward_label: 0.0,
            next_obs: vec![x + 1.0 / len as f32, episode as f32],
            terminal: false,
            episode,
            step,
        });
    }
}
