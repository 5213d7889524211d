//! Importance vectors from world-model attention, return-redistribution
//! reward targets, the auxiliary losses and ensemble training on the
//! combined objective.

mod train;

pub use train::{RewardTrainer, SessionStats};

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, Segment};
use crate::diffcore::{Bound, Graph, Real, Var};
use crate::error::{Error, Result};
use crate::reward::{ce_forward, RewardMember};
use crate::worldmodel::AttentionMap;

/// Discount in the bisimulation target.
pub const BISIM_GAMMA: f64 = 0.99;

/// Lambda used by the prior-only mode.
pub const PRIOR_ONLY_LAMBDA: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditKind {
    Prior,
    Rvar,
    Nrp,
    Bisim,
    None,
    PriorOnly,
}

impl CreditKind {
    pub const ALL: [CreditKind; 6] =
        [CreditKind::Prior, CreditKind::Rvar, CreditKind::Nrp, CreditKind::Bisim, CreditKind::None, CreditKind::PriorOnly];

    /// Whether the kind needs world-model attention.
    pub fn needs_attention(self) -> bool {
        matches!(self, CreditKind::Prior | CreditKind::Nrp | CreditKind::PriorOnly)
    }

    /// Whether the auxiliary term is a redistribution MSE.
    pub fn redistributes(self) -> bool {
        matches!(self, CreditKind::Prior | CreditKind::Rvar | CreditKind::Nrp | CreditKind::PriorOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CreditKind::Prior => "prior",
            CreditKind::Rvar => "rvar",
            CreditKind::Nrp => "nrp",
            CreditKind::Bisim => "bisim",
            CreditKind::None => "none",
            CreditKind::PriorOnly => "prior-only",
        }
    }
}

impl fmt::Display for CreditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CreditKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(CreditKind::Prior),
            "rvar" => Ok(CreditKind::Rvar),
            "nrp" => Ok(CreditKind::Nrp),
            "bisim" => Ok(CreditKind::Bisim),
            "none" => Ok(CreditKind::None),
            "prior-only" | "prior_only" => Ok(CreditKind::PriorOnly),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreditStrategy {
    pub kind: CreditKind,
    pub lambda: f64,
}

impl CreditStrategy {
    pub fn new(kind: CreditKind, lambda: f64) -> Result<Self> {
        let s = CreditStrategy { kind, lambda };
        s.validate()?;
        Ok(s)
    }

    /// Default weight for a task: large for sparse rewards, small for dense.
    pub fn with_default_lambda(kind: CreditKind, sparse: bool) -> Self {
        let lambda = match kind {
            CreditKind::PriorOnly => PRIOR_ONLY_LAMBDA,
            _ if sparse => 1000.0,
            _ => 5.0,
        };
        CreditStrategy { kind, lambda }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Whether training adds an auxiliary term at all.
    pub fn has_aux(&self) -> bool {
        self.kind != CreditKind::None && self.lambda != 0.0
    }
}

/// `alpha_t = (1/L) sum_l (w_l[s_t] + w_l[a_t])` over the `2T` attention
/// weights of each layer.
pub fn importance_from_attention(map: &AttentionMap) -> Result<Vec<f64>> {
    let layers = map.layers.len();
    if layers == 0 {
        return Err(Error::Shape("attention map has no layers".into()));
    }
    let tokens = map.layers[0].len();
    if tokens == 0 || tokens % 2 != 0 || map.layers.iter().any(|l| l.len() != tokens) {
        return Err(Error::Shape(format!("attention layers must share an even token count, got {tokens}")));
    }
    let mut alpha = vec![0.0; tokens / 2];
    for layer in &map.layers {
        for (t, a) in alpha.iter_mut().enumerate() {
            *a += layer[2 * t] + layer[2 * t + 1];
        }
    }
    alpha.iter_mut().for_each(|a| *a /= layers as f64);
    Ok(alpha)
}

pub fn uniform_importance(t: usize) -> Vec<f64> {
    vec![1.0 / t as f64; t]
}

/// Min-max normalise then softmax; constant input falls back to uniform.
pub fn nrp_weights(alpha: &[f64]) -> Vec<f64> {
    let lo = alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        log::info!("constant importance vector: using uniform weights");
        return uniform_importance(alpha.len());
    }
    let e: Vec<f64> = alpha.iter().map(|a| ((a - lo) / (hi - lo)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Per-step reward targets that redistribute the predicted return `g_hat`.
pub fn reward_targets(kind: CreditKind, alpha: &[f64], g_hat: f64, t: usize) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Data("segment length must be positive".into()));
    }
    let weights = match kind {
        CreditKind::Rvar => uniform_importance(t),
        CreditKind::Prior | CreditKind::PriorOnly => alpha.to_vec(),
        CreditKind::Nrp => nrp_weights(alpha),
        CreditKind::Bisim | CreditKind::None => {
            return Err(Error::Config(format!("method {kind} has no redistribution targets")));
        }
    };
    if weights.len() != t {
        return Err(Error::Shape(format!("importance of length {} for a segment of {t} steps", weights.len())));
    }
    Ok(weights.into_iter().map(|w| w * g_hat).collect())
}

/// Mean squared error between per-step rewards `[l, 1]` and constant targets.
pub fn prior_loss_graph<T: Real>(g: &mut Graph<T>, rewards: Var, targets: &[f64]) -> Result<Var> {
    let t = g.constant(g.shape(rewards).to_vec(), targets.iter().map(|&x| T::of(x)).collect())?;
    let d = g.sub(rewards, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean over `pairs` of `(|z_i - z_j|_1 - |r_i - r_j| - gamma |z'_i - z'_j|_1)^2`.
pub fn bisim_loss_graph<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    r: Var,
    z_next: Var,
    pairs: &[(usize, usize)],
    gamma: f64,
) -> Result<Var> {
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let n = pairs.len();
    let dist = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let xi = g.gather_rows(x, is.clone())?;
        let xj = g.gather_rows(x, js.clone())?;
        let d = g.sub(xi, xj)?;
        let a = g.abs(d);
        let s = g.sum_last(a);
        g.reshape(s, vec![n])
    };
    let dz = dist(g, z)?;
    let dr = dist(g, r)?;
    let dn = dist(g, z_next)?;
    let dn = g.scale(dn, T::of(gamma));
    let e = g.sub(dz, dr)?;
    let e = g.sub(e, dn)?;
    let sq = g.square(e);
    Ok(g.mean(sq))
}

/// Scalar form of one bisimulation term.
pub fn bisim_term(z_dist: f64, reward_gap: f64, next_dist: f64, gamma: f64) -> f64 {
    (z_dist - reward_gap - gamma * next_dist).powi(2)
}

/// A preference triplet with the importance vectors of both segments
/// (needed by attention-based kinds).
#[derive(Clone, Copy, Debug)]
pub struct TrainPair<'a> {
    pub seg_a: &'a Segment,
    pub seg_b: &'a Segment,
    pub label: Label,
    pub alpha_a: Option<&'a [f64]>,
    pub alpha_b: Option<&'a [f64]>,
}

/// Auxiliary-loss diagnostics of one combined-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub aux: f64,
}

/// `mean CE + lambda * aux`, where aux is the redistribution MSE on both
/// segments of each pair, or the bisimulation loss plus a next-embedding
/// regression, or nothing. Targets use detached predicted returns.
pub fn combined_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    member: &RewardMember<T>,
    batch: &[TrainPair<'_>],
    strategy: &CreditStrategy,
    discount: Option<f64>,
    pair_seed: u64,
) -> Result<(Var, LossParts)> {
    let refs: Vec<(&Segment, &Segment, Label)> = batch.iter().map(|b| (b.seg_a, b.seg_b, b.label)).collect();
    let f = ce_forward(g, p, member, &refs, discount)?;
    let ce = g.scalar(f.loss).as_f64();
    if !strategy.has_aux() {
        return Ok((f.loss, LossParts { ce, aux: 0.0 }));
    }
    let n = batch.len();
    let l = batch[0].seg_a.len();
    let aux = if strategy.kind.redistributes() {
        let mut terms = Vec::with_capacity(2);
        for (side, rewards) in [(0, f.rewards_a), (1, f.rewards_b)] {
            let values: Vec<f64> = g.detached_values(rewards).iter().map(|v| v.as_f64()).collect();
            let mut targets = Vec::with_capacity(n * l);
            for (i, pair) in batch.iter().enumerate() {
                let g_hat: f64 = values[i * l..(i + 1) * l].iter().sum();
                let alpha = if side == 0 { pair.alpha_a } else { pair.alpha_b };
                let alpha: Vec<f64> = match (strategy.kind, alpha) {
                    (CreditKind::Rvar, _) => uniform_importance(l),
                    (_, Some(a)) => a.to_vec(),
                    (_, None) => return Err(Error::Config(format!("method {} needs world-model attention", strategy.kind))),
                };
                targets.extend(reward_targets(strategy.kind, &alpha, g_hat, l)?);
            }
            // Mean over all steps of the batch equals the mean of per-segment MSEs.
            terms.push(prior_loss_graph(g, rewards, &targets)?);
        }
        g.add(terms[0], terms[1])?
    } else {
        let z = g.concat_rows(f.embed_a, f.embed_b)?;
        let r = g.concat_rows(f.rewards_a, f.rewards_b)?;
        let z_next = member.next_head.forward(g, p, z)?;
        let rows = 2 * n * l;
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let pairs: Vec<(usize, usize)> = (0..n * l)
            .map(|_| {
                let s = sample(&mut rng, rows, 2);
                (s.index(0), s.index(1))
            })
            .collect();
        let bisim = bisim_loss_graph(g, z, r, z_next, &pairs, BISIM_GAMMA)?;
        // The next-embedding head regresses the following step's embedding.
        let cur: Vec<usize> = (0..2 * n).flat_map(|s| (0..l - 1).map(move |t| s * l + t)).collect();
        let nxt: Vec<usize> = cur.iter().map(|i| i + 1).collect();
        if cur.is_empty() {
            bisim
        } else {
            let pred = g.gather_rows(z_next, cur)?;
            let target = g.gather_rows(z, nxt)?;
            let target = g.detach(target);
            let d = g.sub(pred, target)?;
            let sq = g.square(d);
            let trans = g.mean(sq);
            g.add(bisim, trans)?
        }
    };
    let aux_value = g.scalar(aux).as_f64();
    let weighted = g.scale(aux, T::of(strategy.lambda));
    let total = g.add(f.loss, weighted)?;
    Ok((total, LossParts { ce, aux: aux_value }))
}
