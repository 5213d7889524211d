//! Layers built on [`Graph`]. Layers only hold [`ParamId`]s; the tensors
//! live in the owning model's [`ParamSet`], which keeps models castable
//! between `f32` and `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Bound, Graph, Var};
use super::real::Real;
use super::tensor::{ParamId, ParamSet, Tensor};
use crate::error::Result;

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// Affine map `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamSet<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = ps.add(format!("{name}.weight"), fan_in_uniform(rng, vec![in_dim, out_dim], in_dim));
        let bias = ps.add(format!("{name}.bias"), fan_in_uniform(rng, vec![out_dim], in_dim));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_row(y, p[self.bias])
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Real>(&self, ps: &mut ParamSet<T>) {
        for id in [self.weight, self.bias] {
            ps.get_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// Lookup table `[rows, dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamSet<T>, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        let table = ps.add(format!("{name}.table"), fan_in_uniform(rng, vec![rows, dim], dim));
        Embedding { table, rows, dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, idx: Vec<usize>) -> Result<Var> {
        g.gather_rows(p[self.table], idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::new(vec![dim], vec![T::one(); dim]).unwrap());
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], T::of(1e-5))
    }
}

/// Feed-forward stack of [`Linear`] layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, hidden, output }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(*self.forward_all(g, p, x)?.last().unwrap())
    }

    /// Activations after every layer; the second-to-last entry is the
    /// penultimate embedding.
    pub fn forward_all<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            let act = if i + 1 == self.layers.len() { self.output } else { self.hidden };
            h = act.apply(g, h);
            outs.push(h);
        }
        Ok(outs)
    }
}
