//! Central finite-difference verification of analytic gradients.

use super::graph::{Bound, Graph, Var};
use super::tensor::Module;
use crate::error::Result;

/// Denominator floor in the relative error. Central differences at h = 1e-5
/// carry roundoff near 1e-11, so gradients that are exactly zero (a key bias
/// under softmax, say) need a floor well above that.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Element index where `max_rel_error` occurs.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Set when the loss itself could not be evaluated.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<M, F>(module: &M, loss_fn: &F, tape: &[Vec<f64>]) -> Result<f64>
where
    M: Module<f64>,
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::replaying(tape.to_vec());
    let bound = g.bind(module.params());
    let loss = loss_fn(&mut g, &bound)?;
    Ok(g.scalar(loss))
}

/// Compares reverse-mode gradients with central differences of step `h`
/// for every element of every parameter. Values read through
/// `Graph::detached_values` stay at their unperturbed values. Failures are
/// reported, not raised.
pub fn grad_check<M, F>(module: &M, loss_fn: F, h: f64, tolerance: f64) -> GradCheckReport
where
    M: Module<f64> + Clone,
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let fail = |e: crate::Error| GradCheckReport { entries: Vec::new(), tolerance, error: Some(e.to_string()) };
    let mut g = Graph::recording();
    let bound = g.bind(module.params());
    let loss = match loss_fn(&mut g, &bound) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    if let Err(e) = g.backward(loss) {
        return fail(e);
    }
    let analytic = bound.grads(&g);
    let tape = g.take_tape();

    let mut work = module.clone();
    let mut entries = Vec::new();
    for (pi, grad) in analytic.iter().enumerate() {
        let name = module.params().names()[pi].clone();
        let mut entry = ParamCheck { name, max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for (j, &a) in grad.iter().enumerate() {
            let orig = work.params().tensors()[pi].data()[j];
            work.params_mut().tensors_mut()[pi].data_mut()[j] = orig + h;
            let plus = eval(&work, &loss_fn, &tape);
            work.params_mut().tensors_mut()[pi].data_mut()[j] = orig - h;
            let minus = eval(&work, &loss_fn, &tape);
            work.params_mut().tensors_mut()[pi].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return fail(e),
            };
            let n = (plus - minus) / (2.0 * h);
            let rel = relative_error(a, n);
            entry.max_abs_error = entry.max_abs_error.max((a - n).abs());
            if rel > entry.max_rel_error || (j == 0 && rel == 0.0) {
                entry.max_rel_error = rel;
                entry.worst_index = j;
                entry.analytic = a;
                entry.numeric = n;
            }
        }
        entries.push(entry);
    }
    GradCheckReport { entries, tolerance, error: None }
}
