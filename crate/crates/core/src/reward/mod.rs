//! Learned reward ensemble, Bradley-Terry preference probabilities and the
//! preference cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, Segment};
use crate::diffcore::{Activation, Bound, Graph, Linear, Mlp, Module, ParamSet, Real, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-7;

/// Rows per inference chunk, bounding graph memory.
const INFER_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    /// Passes over the preference dataset per member and session.
    pub epochs: usize,
    /// When set, predicted returns are discounted by this factor instead of
    /// plain sums.
    pub discount: Option<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { ensemble_size: 3, hidden: vec![256, 256, 256], lr: 3e-4, batch_size: 32, epochs: 20, discount: None }
    }
}

/// One reward network `r(s, a) in [-1, 1]` with a next-embedding head on
/// its penultimate layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RewardMember<T: Real = f32> {
    params: ParamSet<T>,
    pub mlp: Mlp,
    pub next_head: Linear,
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl<T: Real> Module<T> for RewardMember<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Real> RewardMember<T> {
    pub fn new<R: Rng>(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut dims = vec![obs_dim + act_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mlp = Mlp::new(&mut params, "reward", &dims, Activation::Silu, Activation::Tanh, rng);
        let width = *dims.get(dims.len() - 2).unwrap();
        let next_head = Linear::new(&mut params, "reward.next", width, width, rng);
        RewardMember { params, mlp, next_head, obs_dim, act_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.act_dim
    }

    pub fn cast<U: Real>(&self) -> RewardMember<U> {
        RewardMember {
            params: self.params.cast(),
            mlp: self.mlp.clone(),
            next_head: self.next_head.clone(),
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
        }
    }

    /// Per-row rewards `[n, 1]` and penultimate embeddings `[n, width]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let outs = self.mlp.forward_all(g, p, x)?;
        let n = outs.len();
        let penult = if n >= 2 { outs[n - 2] } else { x };
        Ok((outs[n - 1], penult))
    }

    /// Rewards for row-major `[n, obs_dim + act_dim]` inputs.
    pub fn rewards(&self, inputs: &[T]) -> Result<Vec<T>> {
        let d = self.input_dim();
        if inputs.len() % d != 0 {
            return Err(Error::Shape(format!("reward inputs of length {} are not rows of width {d}", inputs.len())));
        }
        let mut out = Vec::with_capacity(inputs.len() / d);
        for chunk in inputs.chunks(INFER_CHUNK * d) {
            let mut g = Graph::new();
            let p = g.bind_frozen(&self.params);
            let x = g.constant(vec![chunk.len() / d, d], chunk.to_vec())?;
            let (r, _) = self.forward(&mut g, &p, x)?;
            out.extend_from_slice(g.value(r));
        }
        Ok(out)
    }

    pub fn evaluate(&self, obs: &[T], action: &[T]) -> Result<T> {
        let mut x = obs.to_vec();
        x.extend_from_slice(action);
        Ok(self.rewards(&x)?[0])
    }

    pub fn segment_rewards(&self, seg: &Segment) -> Result<Vec<T>> {
        let x: Vec<T> = seg.inputs().into_iter().map(|v| T::of(v as f64)).collect();
        self.rewards(&x)
    }

    /// Undiscounted sum of per-step rewards over the segment.
    pub fn predicted_return(&self, seg: &Segment) -> Result<T> {
        Ok(self.segment_rewards(seg)?.into_iter().fold(T::zero(), |acc, r| acc + r))
    }
}

/// `P[a > b]` from two return sums, via a stable two-way softmax.
pub fn bradley_terry(ga: f64, gb: f64) -> f64 {
    let d = ga - gb;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Per-step discount weights `gamma^t`, or all ones for plain sums.
pub fn return_weights(l: usize, discount: Option<f64>) -> Vec<f64> {
    match discount {
        None => vec![1.0; l],
        Some(g) => (0..l).map(|t| g.powi(t as i32)).collect(),
    }
}

pub fn preference_probability<T: Real>(member: &RewardMember<T>, a: &Segment, b: &Segment) -> Result<f64> {
    Ok(bradley_terry(member.predicted_return(a)?.as_f64(), member.predicted_return(b)?.as_f64()))
}

/// Graph pieces for a batch of preference pairs.
pub struct PairForward {
    /// Rewards of all `a` segments, `[batch * l, 1]`.
    pub rewards_a: Var,
    pub rewards_b: Var,
    pub embed_a: Var,
    pub embed_b: Var,
    /// Per-pair losses `[batch]`.
    pub ce: Var,
    /// Mean cross-entropy over the batch.
    pub loss: Var,
}

fn stack_inputs<T: Real>(g: &mut Graph<T>, segs: &[&Segment]) -> Result<Var> {
    let l = segs[0].len();
    let d = segs[0].states[0].len() + segs[0].actions[0].len();
    let mut data = Vec::with_capacity(segs.len() * l * d);
    for s in segs {
        if s.len() != l {
            return Err(Error::Data("segments in a batch differ in length".into()));
        }
        data.extend(s.inputs().into_iter().map(|v| T::of(v as f64)));
    }
    g.constant(vec![segs.len() * l, d], data)
}

/// Builds the preference cross-entropy for `batch` on the graph.
pub fn ce_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    member: &RewardMember<T>,
    batch: &[(&Segment, &Segment, Label)],
    discount: Option<f64>,
) -> Result<PairForward> {
    if batch.is_empty() {
        return Err(Error::Data("empty preference batch".into()));
    }
    let n = batch.len();
    let l = batch[0].0.len();
    let xa = stack_inputs(g, &batch.iter().map(|b| b.0).collect::<Vec<_>>())?;
    let xb = stack_inputs(g, &batch.iter().map(|b| b.1).collect::<Vec<_>>())?;
    let (ra, ea) = member.forward(g, p, xa)?;
    let (rb, eb) = member.forward(g, p, xb)?;
    let (ga, gb) = match discount {
        None => {
            let ra2 = g.reshape(ra, vec![n, l])?;
            let rb2 = g.reshape(rb, vec![n, l])?;
            (g.sum_last(ra2), g.sum_last(rb2))
        }
        Some(_) => {
            let w: Vec<T> = return_weights(l, discount).into_iter().map(T::of).collect();
            let wv = g.constant(vec![l, 1], w)?;
            let ra2 = g.reshape(ra, vec![n, l])?;
            let rb2 = g.reshape(rb, vec![n, l])?;
            let ga = g.matmul(ra2, wv)?;
            let gb = g.matmul(rb2, wv)?;
            (g.reshape(ga, vec![n])?, g.reshape(gb, vec![n])?)
        }
    };
    let diff = g.sub(ga, gb)?;
    let labels: Vec<(T, T)> = batch.iter().map(|b| (T::of(b.2 .0 as f64), T::of(b.2 .1 as f64))).collect();
    let ce = g.preference_ce(diff, &labels, P_CLAMP)?;
    let loss = g.mean(ce);
    Ok(PairForward { rewards_a: ra, rewards_b: rb, embed_a: ea, embed_b: eb, ce, loss })
}

/// Mean preference cross-entropy of `member` on `batch`.
pub fn ce_loss<T: Real>(member: &RewardMember<T>, batch: &[(&Segment, &Segment, Label)]) -> Result<T> {
    let mut g = Graph::new();
    let p = g.bind_frozen(member.params());
    let f = ce_forward(&mut g, &p, member, batch, None)?;
    Ok(g.scalar(f.loss))
}

/// `E` independently initialised reward members.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewardEnsemble {
    pub members: Vec<RewardMember<f32>>,
}

impl RewardEnsemble {
    pub fn new<R: Rng>(config: &RewardConfig, obs_dim: usize, act_dim: usize, rng: &mut R) -> Result<Self> {
        if config.ensemble_size == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        let members = (0..config.ensemble_size).map(|_| RewardMember::new(obs_dim, act_dim, &config.hidden, rng)).collect();
        Ok(RewardEnsemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Mean member reward per input row.
    pub fn mean_rewards(&self, inputs: &[f32]) -> Result<Vec<f32>> {
        let mut acc: Vec<f32> = Vec::new();
        for m in &self.members {
            let r = m.rewards(inputs)?;
            if acc.is_empty() {
                acc = r;
            } else {
                acc.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
            }
        }
        let e = self.members.len() as f32;
        Ok(acc.into_iter().map(|a| a / e).collect())
    }

    pub fn ensemble_reward(&self, obs: &[f32], action: &[f32]) -> Result<f32> {
        let mut x = obs.to_vec();
        x.extend_from_slice(action);
        Ok(self.mean_rewards(&x)?[0])
    }

    /// `P[a > b]` for every member.
    pub fn member_probabilities(&self, a: &Segment, b: &Segment) -> Result<Vec<f64>> {
        self.members.iter().map(|m| preference_probability(m, a, b)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg_from(values: &[f32]) -> Segment {
        Segment {
            states: values.iter().map(|&v| vec![v, 1.0 - v]).collect(),
            actions: values.iter().map(|_| vec![1.0]).collect(),
            target_rewards: values.to_vec(),
            source_episode: 0,
            start_index: 0,
        }
    }

    #[test]
    fn bradley_terry_examples() {
        assert_eq!(bradley_terry(1.3, 1.3), 0.5);
        assert!((bradley_terry(0.0, 3f64.ln()) - 0.25).abs() < 1e-15);
        let p = bradley_terry(50.0, -50.0);
        assert!(p.is_finite() && (1.0 - p) < 1e-40);
        assert!(bradley_terry(-50.0, 50.0) > 0.0);
    }

    #[test]
    fn ce_is_ln2_when_probabilities_are_half() {
        let mut member = RewardMember::<f64>::new(2, 1, &[4], &mut ChaCha8Rng::seed_from_u64(0));
        let last = member.mlp.layers.last().unwrap().clone();
        last.zero(member.params_mut());
        let a = seg_from(&[0.1, 0.4]);
        let b = seg_from(&[0.9, 0.3]);
        let loss = ce_loss(&member, &[(&a, &b, Label::A), (&b, &a, Label::EQUAL)]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn predicted_return_matches_per_step_sum() {
        let member = RewardMember::<f32>::new(2, 1, &[8, 8], &mut ChaCha8Rng::seed_from_u64(3));
        let s = seg_from(&[0.1, 0.5, -0.2, 0.7, 0.0]);
        let mut acc = 0f32;
        for (o, a) in s.states.iter().zip(&s.actions) {
            acc += member.evaluate(o, a).unwrap();
        }
        assert_eq!(member.predicted_return(&s).unwrap(), acc);
    }

    #[test]
    fn ensemble_mean_of_members() {
        let cfg = RewardConfig { ensemble_size: 3, hidden: vec![4], ..Default::default() };
        let mut ens = RewardEnsemble::new(&cfg, 2, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (m, target) in ens.members.iter_mut().zip([0.2f32, 0.4, 0.6]) {
            let last = m.mlp.layers.last().unwrap().clone();
            last.zero(m.params_mut());
            m.params_mut().get_mut(last.bias).data_mut()[0] = target.atanh();
        }
        let r = ens.ensemble_reward(&[0.3, 0.1], &[1.0]).unwrap();
        assert!((r - 0.4).abs() < 1e-6);
        ens.members.reverse();
        assert!((ens.ensemble_reward(&[0.3, 0.1], &[1.0]).unwrap() - r).abs() < 1e-7);
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let member = RewardMember::<f64>::new(2, 1, &[5, 5], &mut rng);
        let a = seg_from(&[0.3, -0.8, 0.5]);
        let b = seg_from(&[0.9, 0.2, -0.1]);
        let report = grad_check(
            &member,
            |g, p| Ok(ce_forward(g, p, &member, &[(&a, &b, Label::A), (&b, &a, Label::EQUAL)], None)?.loss),
            1e-5,
            1e-4,
        );
        assert!(report.passed(), "{:?}", report.worst());
    }
}
