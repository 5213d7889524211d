//! Minimal differentiable computation core: tensors, a reverse-mode tape,
//! dense/attention layers, Adam, and finite-difference gradient checks.

mod adam;
mod gradcheck;
mod graph;
mod nn;
mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{AttnDims, Bound, Graph, Unary, Var};
pub use nn::{fan_in_uniform, Activation, Embedding, LayerNorm, Linear, Mlp};
pub use real::Real;
pub use tensor::{Module, ParamId, ParamSet, Tensor};

use crate::error::{Error, Result};

/// Evaluates `loss_fn` on the module's parameters and back-propagates.
///
/// Returns the scalar loss and one gradient tensor per parameter, in
/// parameter order.
pub fn forward_backward<T, M, F>(module: &M, loss_fn: F) -> Result<(T, Vec<Tensor<T>>)>
where
    T: Real,
    M: Module<T> + ?Sized,
    F: FnOnce(&mut Graph<T>, &Bound) -> Result<Var>,
{
    module.params().check_finite()?;
    let mut g = Graph::new();
    let bound = g.bind(module.params());
    let loss = loss_fn(&mut g, &bound)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        let location = g.first_non_finite().unwrap_or_else(|| "loss".to_string());
        return Err(Error::Numerical { location });
    }
    g.backward(loss)?;
    let grads = bound
        .grads(&g)
        .into_iter()
        .zip(module.params().tensors())
        .map(|(gr, t)| Tensor::new(t.shape().to_vec(), gr))
        .collect::<Result<Vec<_>>>()?;
    if let Some((name, _)) = module.params().iter().zip(&grads).find(|(_, gr)| !gr.is_finite()).map(|((n, _), g)| (n, g)) {
        return Err(Error::Numerical { location: format!("gradient of parameter {name}") });
    }
    Ok((value, grads))
}

/// Multi-head scaled dot-product attention on `[len, dim]` matrices.
///
/// Returns the `[q_len, v_dim]` output and the weights laid out
/// `[heads, q_len, k_len]`.
pub fn attention_forward<T: Real>(
    queries: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let q = g.leaf(queries, false);
    let k = g.leaf(keys, false);
    let v = g.leaf(values, false);
    let out = g.attention(q, k, v, 1, heads, false)?;
    let (w, dims) = g.attention_weights(out).expect("attention node");
    let weights = Tensor::new(vec![dims.heads, dims.q_len, dims.k_len], w.to_vec())?;
    Ok((g.to_tensor(out), weights))
}
