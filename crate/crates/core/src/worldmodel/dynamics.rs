use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Embedding, Graph, LayerNorm, Linear, Module, ParamSet, Real, Var};
use crate::envs::ActionSpace;
use crate::error::{Error, Result};

/// Pre-norm causal self-attention block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ActionEmbed {
    Table(Embedding),
    Linear(Linear),
}

/// Action inputs for a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionInput<T> {
    Indices(Vec<usize>),
    Vectors(Vec<T>),
}

/// Autoregressive latent-state predictor over interleaved
/// `(z_1, a_1, ..., z_T, a_T)` tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DynamicsModel<T: Real = f32> {
    params: ParamSet<T>,
    pub state_embed: Linear,
    pub action_embed: ActionEmbed,
    pub position: Embedding,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    pub heads: usize,
    pub latent_dim: usize,
    pub max_len: usize,
}

impl<T: Real> Module<T> for DynamicsModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicsShape {
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Longest segment (in steps) the position table covers.
    pub max_len: usize,
}

impl<T: Real> DynamicsModel<T> {
    pub fn new<R: Rng>(shape: DynamicsShape, action_space: &ActionSpace, rng: &mut R) -> Result<Self> {
        let DynamicsShape { latent_dim, width, layers, heads, ffn, max_len } = shape;
        if layers == 0 || heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("dynamics model needs >= 1 layer and width {width} divisible by {heads} heads")));
        }
        let mut params = ParamSet::new();
        let state_embed = Linear::new(&mut params, "dyn.state", latent_dim, width, rng);
        let action_embed = match action_space {
            ActionSpace::Discrete(n) => ActionEmbed::Table(Embedding::new(&mut params, "dyn.action", *n, width, rng)),
            ActionSpace::Continuous { dim, .. } => ActionEmbed::Linear(Linear::new(&mut params, "dyn.action", *dim, width, rng)),
        };
        let position = Embedding::new(&mut params, "dyn.pos", 2 * max_len, width, rng);
        let blocks = (0..layers)
            .map(|i| {
                let n = format!("dyn.block{i}");
                Block {
                    ln1: LayerNorm::new(&mut params, &format!("{n}.ln1"), width),
                    query: Linear::new(&mut params, &format!("{n}.q"), width, width, rng),
                    key: Linear::new(&mut params, &format!("{n}.k"), width, width, rng),
                    value: Linear::new(&mut params, &format!("{n}.v"), width, width, rng),
                    out: Linear::new(&mut params, &format!("{n}.o"), width, width, rng),
                    ln2: LayerNorm::new(&mut params, &format!("{n}.ln2"), width),
                    ff1: Linear::new(&mut params, &format!("{n}.ff1"), width, ffn, rng),
                    ff2: Linear::new(&mut params, &format!("{n}.ff2"), ffn, width, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, "dyn.ln_f", width);
        let head = Linear::new(&mut params, "dyn.head", width, latent_dim, rng);
        Ok(DynamicsModel { params, state_embed, action_embed, position, blocks, ln_f, head, heads, latent_dim, max_len })
    }

    pub fn cast<U: Real>(&self) -> DynamicsModel<U> {
        DynamicsModel {
            params: self.params.cast(),
            state_embed: self.state_embed.clone(),
            action_embed: self.action_embed.clone(),
            position: self.position.clone(),
            blocks: self.blocks.clone(),
            ln_f: self.ln_f.clone(),
            head: self.head.clone(),
            heads: self.heads,
            latent_dim: self.latent_dim,
            max_len: self.max_len,
        }
    }

    /// Runs `batch` sequences of `len` steps. `latents` is `[batch * len,
    /// latent_dim]` (one-hot codes). Returns the final hidden states of all
    /// `2 * len` tokens per sequence and each layer's attention node.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        latents: Var,
        actions: &ActionInput<T>,
        batch: usize,
        len: usize,
    ) -> Result<(Var, Vec<Var>)> {
        if len == 0 || len > self.max_len {
            return Err(Error::Shape(format!("sequence length {len} outside 1..={}", self.max_len)));
        }
        let n = batch * len;
        let s = self.state_embed.forward(g, p, latents)?;
        let a = match (&self.action_embed, actions) {
            (ActionEmbed::Table(e), ActionInput::Indices(idx)) => e.forward(g, p, idx.clone())?,
            (ActionEmbed::Linear(l), ActionInput::Vectors(v)) => {
                let x = g.constant(vec![n, l.in_dim], v.clone())?;
                l.forward(g, p, x)?
            }
            _ => return Err(Error::Shape("action input kind does not match the action embedding".into())),
        };
        let both = g.concat_rows(s, a)?;
        let mut order = Vec::with_capacity(2 * n);
        for b in 0..batch {
            for t in 0..len {
                order.push(b * len + t);
                order.push(n + b * len + t);
            }
        }
        let tokens = g.gather_rows(both, order)?;
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..2 * len).collect();
        let pos = self.position.forward(g, p, pos_idx)?;
        let mut x = g.add(tokens, pos)?;
        let mut attn = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, p, x)?;
            let q = blk.query.forward(g, p, h)?;
            let k = blk.key.forward(g, p, h)?;
            let v = blk.value.forward(g, p, h)?;
            let at = g.attention(q, k, v, batch, self.heads, true)?;
            attn.push(at);
            let o = blk.out.forward(g, p, at)?;
            x = g.add(x, o)?;
            let h = blk.ln2.forward(g, p, x)?;
            let f = blk.ff1.forward(g, p, h)?;
            let f = g.silu(f);
            let f = blk.ff2.forward(g, p, f)?;
            x = g.add(x, f)?;
        }
        let x = self.ln_f.forward(g, p, x)?;
        Ok((x, attn))
    }

    /// Next-latent logits at each action token except the last:
    /// `[batch * (len - 1), latent_dim]`.
    pub fn predict(&self, g: &mut Graph<T>, hidden: Var, p: &Bound, batch: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (0..batch).flat_map(|b| (0..len - 1).map(move |t| b * 2 * len + 2 * t + 1)).collect();
        let h = g.gather_rows(hidden, rows)?;
        self.head.forward(g, p, h)
    }
}
