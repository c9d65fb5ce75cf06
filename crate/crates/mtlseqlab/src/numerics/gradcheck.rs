//! Finite-difference gradient oracle.
//!
//! The oracle never looks at how gradients were produced; it re-evaluates the
//! loss at perturbed parameter points. Callers must hand it a deterministic
//! loss: dropout disabled (or masks frozen) and any task/instance sampling
//! pinned, otherwise the differences measure noise.

use crate::error::{Error, Result};

use super::optim::{ModelParams, ParamGrads};
use super::tensor::Tensor;

/// Central-difference gradient of `loss` with respect to every scalar in
/// `params`: `(loss(θ+eps) − loss(θ−eps)) / (2·eps)`.
pub fn finite_diff_grad(
    loss: impl Fn(&ModelParams) -> Result<f64>,
    params: &ModelParams,
    eps: f64,
) -> Result<ParamGrads> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidOptimizer(format!(
            "finite-difference eps must be positive, got {eps}"
        )));
    }
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut work = params.clone();
    let mut grads = ParamGrads::new();
    for name in &names {
        let len = params.get(name)?.len();
        let shape = params.get(name)?.shape().to_vec();
        let mut g = vec![0.0; len];
        for i in 0..len {
            let base = params.get(name)?.data()[i];
            let mut probe = |theta: f64| -> Result<f64> {
                work.get_mut(name)?.data_mut()[i] = theta;
                let v = loss(&work)?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        param: name.clone(),
                        index: i,
                    });
                }
                Ok(v)
            };
            let up = probe(base + eps)?;
            let down = probe(base - eps)?;
            work.get_mut(name)?.data_mut()[i] = base;
            g[i] = (up - down) / (2.0 * eps);
        }
        grads.insert(name.clone(), Tensor::new(shape, g)?);
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, 1e-5)` — relative error with an absolute floor.
/// Central differences in 64-bit carry ~1e-11–1e-10 of rounding noise at
/// eps=1e-5 on a loss of order 1, so components below the floor are compared
/// absolutely (a tighter floor would flag that noise as disagreement, while
/// any genuine backprop bug in a meaningful component still lands orders of
/// magnitude above the 1e-4 gate).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Largest element-wise [`relative_error`] across two gradient maps. A
/// parameter missing from one side compares against zeros.
pub fn max_relative_error(a: &ParamGrads, b: &ParamGrads) -> f64 {
    let mut names: Vec<&String> = a.keys().chain(b.keys()).collect();
    names.sort();
    names.dedup();
    let mut worst = 0.0_f64;
    for name in names {
        let (xa, xb) = (a.get(name), b.get(name));
        let len = xa.or(xb).map_or(0, Tensor::len);
        for i in 0..len {
            let va = xa.map_or(0.0, |t| t.data()[i]);
            let vb = xb.map_or(0.0, |t| t.data()[i]);
            worst = worst.max(relative_error(va, vb));
        }
    }
    worst
}
