use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Bound, Graph, Mlp, Module, ParamSet, Real, Var};
use crate::error::{Error, Result};

/// Encoder from observations to `C x V` categorical logits and a decoder
/// from one-hot latents back to observations.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ObservationModel<T: Real = f32> {
    params: ParamSet<T>,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub obs_dim: usize,
    pub categoricals: usize,
    pub classes: usize,
}

impl<T: Real> Module<T> for ObservationModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

/// Encoded observation: raw logits plus one chosen class per categorical.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent<T> {
    /// `[categoricals * classes]`, row-major by categorical.
    pub logits: Vec<T>,
    pub indices: Vec<usize>,
}

pub(crate) fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        out.extend(row.iter().map(|&v| (v - mx).exp() / z));
    }
    out
}

pub(crate) fn argmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn one_hot<T: Real>(indices: &[usize], classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); indices.len() * classes];
    for (r, &i) in indices.iter().enumerate() {
        out[r * classes + i] = T::one();
    }
    out
}

impl<T: Real> ObservationModel<T> {
    pub fn new<R: Rng>(obs_dim: usize, hidden: usize, categoricals: usize, classes: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let latent = categoricals * classes;
        let encoder = Mlp::new(&mut params, "obs.enc", &[obs_dim, hidden, latent], Activation::Silu, Activation::Identity, rng);
        let decoder = Mlp::new(&mut params, "obs.dec", &[latent, hidden, obs_dim], Activation::Silu, Activation::Identity, rng);
        ObservationModel { params, encoder, decoder, obs_dim, categoricals, classes }
    }

    pub fn latent_dim(&self) -> usize {
        self.categoricals * self.classes
    }

    pub fn cast<U: Real>(&self) -> ObservationModel<U> {
        ObservationModel {
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            obs_dim: self.obs_dim,
            categoricals: self.categoricals,
            classes: self.classes,
        }
    }

    /// Encoder logits for row-major observations `[n, obs_dim]`.
    pub fn logits(&self, observations: &[T]) -> Result<Vec<T>> {
        if observations.len() % self.obs_dim != 0 {
            return Err(Error::Shape(format!("observations of length {} are not rows of width {}", observations.len(), self.obs_dim)));
        }
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let x = g.constant(vec![observations.len() / self.obs_dim, self.obs_dim], observations.to_vec())?;
        let z = self.encoder.forward(&mut g, &p, x)?;
        Ok(g.value(z).to_vec())
    }

    /// Logits plus a class sampled from each categorical.
    pub fn encode<R: Rng>(&self, observation: &[T], rng: &mut R) -> Result<Latent<T>> {
        let logits = self.logits(observation)?;
        let probs = softmax_rows(&logits, self.classes);
        let indices = probs
            .chunks(self.classes)
            .map(|row| {
                let u = T::of(rng.gen::<f64>());
                let mut acc = T::zero();
                for (i, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                self.classes - 1
            })
            .collect();
        Ok(Latent { logits, indices })
    }

    /// Most likely class per categorical for each observation row.
    pub fn mode(&self, observations: &[T]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(observations)?, self.classes))
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<T>> {
        let n = indices.len() / self.categoricals;
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let z = g.constant(vec![n, self.latent_dim()], one_hot(indices, self.classes))?;
        let x = self.decoder.forward(&mut g, &p, z)?;
        Ok(g.value(x).to_vec())
    }

    /// Reconstruction MSE through straight-through samples `indices`, plus
    /// `sharpen` times the cross-entropy of each categorical against its own
    /// mode, which drives the encoder toward confident codes.
    pub fn loss(&self, g: &mut Graph<T>, p: &Bound, observations: &[T], indices: &[usize], sharpen: f64) -> Result<Var> {
        let n = observations.len() / self.obs_dim;
        let x = g.constant(vec![n, self.obs_dim], observations.to_vec())?;
        let logits = self.encoder.forward(g, p, x)?;
        let per_cat = g.reshape(logits, vec![n * self.categoricals, self.classes])?;
        let st = g.straight_through(per_cat, indices)?;
        let z = g.reshape(st, vec![n, self.latent_dim()])?;
        let recon = self.decoder.forward(g, p, z)?;
        let d = g.sub(recon, x)?;
        let sq = g.square(d);
        let mse = g.mean(sq);
        if sharpen == 0.0 {
            return Ok(mse);
        }
        let modes = argmax_rows(g.value(per_cat), self.classes);
        let ce = g.soft_cross_entropy(per_cat, one_hot(&modes, self.classes))?;
        let ce = g.sum(ce);
        let ce = g.scale(ce, T::of(sharpen / n as f64));
        g.add(mse, ce)
    }
}
