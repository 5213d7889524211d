//! Transformer world model: categorical observation encoder/decoder, an
//! autoregressive latent predictor over interleaved state/action tokens,
//! the dynamics loss and per-timestep attention extraction.

mod dynamics;
mod observation;

pub use dynamics::{ActionEmbed, ActionInput, Block, DynamicsModel, DynamicsShape};
pub use observation::{Latent, ObservationModel};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ReplayBuffer, Segment};
use crate::diffcore::{forward_backward, AdamConfig, AdamState, Bound, Graph, Module, Real, Var};
use crate::envs::{argmax, ActionSpace};
use crate::error::{Error, Result};
use observation::{one_hot, softmax_rows};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldModelConfig {
    pub categoricals: usize,
    pub classes: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub obs_hidden: usize,
    pub obs_lr: f64,
    pub dyn_lr: f64,
    /// Weight of the encoder self-sharpening term.
    pub sharpen: f64,
    pub obs_batch: usize,
    pub dyn_batch: usize,
    /// Gradient steps per world-model update.
    pub dyn_steps: usize,
    /// Gradient steps on the observation model during pretraining.
    pub obs_steps: usize,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            categoricals: 8,
            classes: 8,
            width: 64,
            layers: 2,
            heads: 2,
            ffn: 128,
            obs_hidden: 64,
            obs_lr: 1e-3,
            dyn_lr: 3e-4,
            sharpen: 0.1,
            obs_batch: 64,
            dyn_batch: 8,
            dyn_steps: 50,
            obs_steps: 2000,
        }
    }
}

/// Final-query attention over the `2T` tokens of a segment, one head-averaged
/// row per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layers: Vec<Vec<f64>>,
}

impl AttentionMap {
    pub fn steps(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len() / 2)
    }
}

/// Dynamics-model inputs derived from a batch of equal-length segments.
pub struct SegmentBatch<T> {
    pub batch: usize,
    pub len: usize,
    /// One-hot mode codes, `[batch * len, latent_dim]`.
    pub latents: Vec<T>,
    pub actions: ActionInput<T>,
    /// Encoder distributions of `o_2..o_T`, `[batch * (len - 1) * C, V]`.
    pub targets: Vec<T>,
}

pub fn segment_batch<T: Real>(obs: &ObservationModel<T>, space: &ActionSpace, segments: &[&Segment]) -> Result<SegmentBatch<T>> {
    let len = segments.first().map_or(0, |s| s.len());
    if len < 2 || segments.iter().any(|s| s.len() != len) {
        return Err(Error::Data("dynamics batches need equal-length segments of at least 2 steps".into()));
    }
    let states: Vec<T> = segments.iter().flat_map(|s| s.states.iter().flatten().map(|&v| T::of(v as f64))).collect();
    let logits = obs.logits(&states)?;
    let latents = one_hot(&observation::argmax_rows(&logits, obs.classes), obs.classes);
    let probs = softmax_rows(&logits, obs.classes);
    let ld = obs.latent_dim();
    let mut targets = Vec::with_capacity(segments.len() * (len - 1) * ld);
    for b in 0..segments.len() {
        targets.extend_from_slice(&probs[(b * len + 1) * ld..(b + 1) * len * ld]);
    }
    let actions = match space {
        ActionSpace::Discrete(_) => ActionInput::Indices(segments.iter().flat_map(|s| s.actions.iter().map(|a| argmax(a))).collect()),
        ActionSpace::Continuous { .. } => {
            ActionInput::Vectors(segments.iter().flat_map(|s| s.actions.iter().flatten().map(|&v| T::of(v as f64))).collect())
        }
    };
    Ok(SegmentBatch { batch: segments.len(), len, latents, actions, targets })
}

/// Cross-entropy between encoder next-latent distributions (constants) and
/// predicted ones, summed over categoricals and averaged over batch and time.
pub fn dynamics_loss_graph<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    dynamics: &DynamicsModel<T>,
    categoricals: usize,
    data: &SegmentBatch<T>,
) -> Result<Var> {
    let (b, l) = (data.batch, data.len);
    let z = g.constant(vec![b * l, dynamics.latent_dim], data.latents.clone())?;
    let (hidden, _) = dynamics.forward(g, p, z, &data.actions, b, l)?;
    let logits = dynamics.predict(g, hidden, p, b, l)?;
    let classes = dynamics.latent_dim / categoricals;
    let per_cat = g.reshape(logits, vec![b * (l - 1) * categoricals, classes])?;
    let ce = g.soft_cross_entropy(per_cat, data.targets.clone())?;
    let total = g.sum(ce);
    Ok(g.scale(total, T::of(1.0 / (b * (l - 1)) as f64)))
}

/// `alpha`-free attention read-out: per layer, the head-averaged weights
/// of the final token's query over all `2T` tokens, for each sequence.
pub fn read_attention<T: Real>(g: &Graph<T>, attn: &[Var], batch: usize) -> Vec<AttentionMap> {
    let mut maps = vec![AttentionMap { layers: Vec::new() }; batch];
    for &a in attn {
        let (w, dims) = g.attention_weights(a).expect("attention node");
        let (h, q, k) = (dims.heads, dims.q_len, dims.k_len);
        for (b, map) in maps.iter_mut().enumerate() {
            let mut row = vec![0f64; k];
            for head in 0..h {
                let off = ((b * h + head) * q + (q - 1)) * k;
                for (r, &v) in row.iter_mut().zip(&w[off..off + k]) {
                    *r += v.as_f64();
                }
            }
            row.iter_mut().for_each(|r| *r /= h as f64);
            map.layers.push(row);
        }
    }
    maps
}

/// Observation model plus latent predictor, with their optimisers.
#[derive(Clone, Debug)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub action_space: ActionSpace,
    pub obs: ObservationModel<f32>,
    pub dynamics: DynamicsModel<f32>,
    obs_opt: AdamState<f32>,
    dyn_opt: AdamState<f32>,
    obs_frozen: bool,
}

impl WorldModel {
    pub fn new<R: Rng>(config: WorldModelConfig, obs_dim: usize, action_space: &ActionSpace, max_len: usize, rng: &mut R) -> Result<Self> {
        let obs = ObservationModel::new(obs_dim, config.obs_hidden, config.categoricals, config.classes, rng);
        let shape = DynamicsShape {
            latent_dim: config.categoricals * config.classes,
            width: config.width,
            layers: config.layers,
            heads: config.heads,
            ffn: config.ffn,
            max_len,
        };
        let dynamics = DynamicsModel::new(shape, action_space, rng)?;
        let obs_opt = AdamState::new(obs.params(), AdamConfig::with_lr(config.obs_lr));
        let dyn_opt = AdamState::new(dynamics.params(), AdamConfig::with_lr(config.dyn_lr));
        Ok(WorldModel { config, action_space: action_space.clone(), obs, dynamics, obs_opt, dyn_opt, obs_frozen: false })
    }

    pub fn observation_frozen(&self) -> bool {
        self.obs_frozen
    }

    /// Stops all further observation-model updates.
    pub fn freeze_observation(&mut self) {
        self.obs_frozen = true;
    }

    /// One observation-model step on row-major observations; returns the loss.
    pub fn observation_step<R: Rng>(&mut self, observations: &[f32], rng: &mut R) -> Result<f32> {
        if self.obs_frozen {
            return Err(Error::Config("observation model is frozen".into()));
        }
        let n = observations.len() / self.obs.obs_dim;
        let mut indices = Vec::with_capacity(n * self.config.categoricals);
        for row in observations.chunks(self.obs.obs_dim) {
            indices.extend(self.obs.encode(row, rng)?.indices);
        }
        let sharpen = self.config.sharpen;
        let obs = &self.obs;
        let (loss, grads) = forward_backward(obs, |g, p| obs.loss(g, p, observations, &indices, sharpen))?;
        self.obs_opt.step(self.obs.params_mut(), &grads)?;
        Ok(loss)
    }

    /// Trains the observation model on random stored observations.
    pub fn train_observation<R: Rng>(&mut self, buffer: &ReplayBuffer, steps: usize, rng: &mut R) -> Result<f32> {
        let mut last = 0.0;
        for _ in 0..steps {
            let mut batch = Vec::new();
            for i in buffer.sample_indices(rng, self.config.obs_batch) {
                batch.extend_from_slice(&buffer.get(i).obs);
            }
            last = self.observation_step(&batch, rng)?;
        }
        Ok(last)
    }

    pub fn dynamics_loss(&self, segments: &[&Segment]) -> Result<f32> {
        let data = segment_batch(&self.obs, &self.action_space, segments)?;
        let mut g = Graph::new();
        let p = g.bind_frozen(self.dynamics.params());
        let loss = dynamics_loss_graph(&mut g, &p, &self.dynamics, self.config.categoricals, &data)?;
        Ok(g.scalar(loss))
    }

    /// One gradient step of the latent predictor; returns the loss.
    pub fn dynamics_step(&mut self, segments: &[&Segment]) -> Result<f32> {
        let data = segment_batch(&self.obs, &self.action_space, segments)?;
        let c = self.config.categoricals;
        let dynamics = &self.dynamics;
        let (loss, grads) = forward_backward(dynamics, |g, p| dynamics_loss_graph(g, p, dynamics, c, &data))?;
        self.dyn_opt.step(self.dynamics.params_mut(), &grads)?;
        Ok(loss)
    }

    /// `steps` dynamics updates on segments of length `l` from the buffer;
    /// returns the mean loss.
    pub fn train_dynamics<R: Rng>(&mut self, buffer: &ReplayBuffer, steps: usize, l: usize, rng: &mut R) -> Result<f32> {
        let mut total = 0.0;
        for _ in 0..steps {
            let segs = buffer.sample_segments(rng, self.config.dyn_batch, l)?;
            total += self.dynamics_step(&segs.iter().collect::<Vec<_>>())?;
        }
        Ok(total / steps.max(1) as f32)
    }

    /// Attention maps of the final prediction position for each segment.
    pub fn extract_attention(&self, segments: &[&Segment]) -> Result<Vec<AttentionMap>> {
        let mut out = Vec::with_capacity(segments.len());
        for chunk in segments.chunks(16) {
            let data = segment_batch(&self.obs, &self.action_space, chunk)?;
            let mut g = Graph::new();
            let p = g.bind_frozen(self.dynamics.params());
            let z = g.constant(vec![data.batch * data.len, self.dynamics.latent_dim], data.latents.clone())?;
            let (_, attn) = self.dynamics.forward(&mut g, &p, z, &data.actions, data.batch, data.len)?;
            out.extend(read_attention(&g, &attn, data.batch));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_segment(len: usize, offset: usize) -> Segment {
        Segment {
            states: (0..len).map(|t| if (t + offset) % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect(),
            actions: (0..len).map(|_| vec![1.0, 0.0]).collect(),
            target_rewards: vec![0.0; len],
            source_episode: 0,
            start_index: offset,
        }
    }

    fn small_config() -> WorldModelConfig {
        WorldModelConfig { categoricals: 2, classes: 3, width: 4, layers: 1, heads: 2, ffn: 6, obs_hidden: 4, ..Default::default() }
    }

    #[test]
    fn zeroed_projections_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = WorldModelConfig { layers: 1, heads: 1, ..small_config() };
        let mut wm = WorldModel::new(cfg, 2, &ActionSpace::Discrete(2), 5, &mut rng).unwrap();
        for b in wm.dynamics.blocks.clone() {
            b.query.zero(wm.dynamics.params_mut());
            b.key.zero(wm.dynamics.params_mut());
        }
        let seg = chain_segment(5, 0);
        let maps = wm.extract_attention(&[&seg]).unwrap();
        assert_eq!(maps[0].layers.len(), 1);
        for &w in &maps[0].layers[0] {
            assert!((w - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = WorldModelConfig { layers: 2, ..small_config() };
        let wm = WorldModel::new(cfg, 2, &ActionSpace::Discrete(2), 6, &mut rng).unwrap();
        let (a, b) = (chain_segment(6, 0), chain_segment(6, 1));
        for map in wm.extract_attention(&[&a, &b]).unwrap() {
            assert_eq!(map.steps(), 6);
            for row in &map.layers {
                assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dynamics_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_config();
        let obs: ObservationModel<f64> = ObservationModel::new(2, 4, cfg.categoricals, cfg.classes, &mut rng);
        let shape = DynamicsShape { latent_dim: 6, width: 4, layers: 1, heads: 2, ffn: 6, max_len: 4 };
        let dynamics: DynamicsModel<f64> = DynamicsModel::new(shape, &ActionSpace::Discrete(2), &mut rng).unwrap();
        let seg = chain_segment(4, 0);
        let data = segment_batch(&obs, &ActionSpace::Discrete(2), &[&seg]).unwrap();
        let report = grad_check(&dynamics, |g, p| dynamics_loss_graph(g, p, &dynamics, 2, &data), 1e-5, 1e-4);
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn frozen_observation_model_rejects_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut wm = WorldModel::new(small_config(), 2, &ActionSpace::Discrete(2), 4, &mut rng).unwrap();
        wm.observation_step(&[1.0, 0.0, 0.0, 1.0], &mut rng).unwrap();
        wm.freeze_observation();
        let before = wm.obs.params().clone();
        assert!(wm.observation_step(&[1.0, 0.0], &mut rng).is_err());
        let seg = chain_segment(4, 0);
        wm.dynamics_step(&[&seg]).unwrap();
        assert_eq!(&before, wm.obs.params());
    }

    #[test]
    fn two_observations_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = WorldModelConfig { obs_hidden: 16, ..small_config() };
        let mut wm = WorldModel::new(cfg, 3, &ActionSpace::Discrete(2), 4, &mut rng).unwrap();
        let data = [1.0, 0.0, 0.5, 0.0, 1.0, -0.5];
        for _ in 0..1500 {
            wm.observation_step(&data, &mut rng).unwrap();
        }
        let recon = wm.obs.decode(&wm.obs.mode(&data).unwrap()).unwrap();
        for (r, x) in recon.iter().zip(&data) {
            assert!((r - x).abs() < 1e-2, "{recon:?}");
        }
    }
}
