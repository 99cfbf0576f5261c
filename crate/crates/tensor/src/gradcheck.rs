//! Central finite-difference verification of tape gradients.

use crate::error::{contract, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Flat indices of the probed elements of `x`.
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest per-element relative deviation.
    pub max_rel_dev: f64,
    /// Flat index (into `x`) where `max_rel_dev` occurs.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

fn scalar_value<F, E>(f: &F, x: &Tensor) -> Result<f64, E>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let out = f(tape.constant(x.clone()))?;
    Ok(out.value().item()?)
}

/// Checks every element of `x`. See [`grad_check_indices`].
pub fn grad_check<F, E>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_indices(f, x, &all, step, tol)
}

/// Compares `d f / d x` from the tape against central differences with
/// spacing `step` at the given flat indices. `f` may fail with any error
/// type that tensor errors convert into.
///
/// The deviation of element `i` is `|a_i - n_i| / max(|a_i|, |n_i|, s)`
/// where `s = max(1e-3 * max_j |n_j|, 1e-6)`, so elements whose gradient is
/// negligible next to the largest one are judged relative to that scale.
pub fn grad_check_indices<F, E>(f: F, x: &Tensor, indices: &[usize], step: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    if !(step > 0.0) {
        return Ok(contract("grad_check", format!("step must be positive, got {step}"))?);
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
        return Ok(contract("grad_check", format!("index {bad} out of range"))?);
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(leaf)?;
    let grads = tape.backward(out)?;
    let full = grads.get(leaf).expect("leaf gradient");
    let analytic: Vec<f64> = indices.iter().map(|&i| full.data()[i]).collect();

    let mut numeric = Vec::with_capacity(indices.len());
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = scalar_value(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = scalar_value(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-6);
    let mut max_rel_dev = 0.0;
    let mut worst_index = indices.first().copied().unwrap_or(0);
    for ((&i, a), n) in indices.iter().zip(&analytic).zip(&numeric) {
        let dev = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if dev > max_rel_dev {
            max_rel_dev = dev;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        indices: indices.to_vec(),
        analytic,
        numeric,
        max_rel_dev,
        worst_index,
        tol,
        passed: max_rel_dev <= tol,
    })
}
