//! Named parameter registry and classic momentum SGD.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Gradient of a scalar loss with respect to each named parameter.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Named registry of all model parameters.
///
/// Tensors are held behind `Arc` so a forward pass can put them on a tape
/// without copying; the optimizer mutates them through [`Arc::make_mut`],
/// which is in-place once the tape has been dropped.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    params: BTreeMap<String, Arc<Tensor>>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register or replace a parameter.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Momentum-SGD state: hyperparameters plus one velocity buffer per updated
/// parameter (materialized as zeros on first use).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidOptimizer(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidOptimizer(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

fn step_one(
    name: &str,
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut OptimizerState,
) -> Result<()> {
    if grad.shape() != param.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_momentum_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let v = state
        .velocity
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(param.shape()));
    let (mu, eta) = (state.momentum, state.learning_rate);
    for ((t, v), g) in param
        .data_mut()
        .iter_mut()
        .zip(v.data_mut())
        .zip(grad.data())
    {
        *v = mu * *v - eta * g;
        *t += *v;
    }
    Ok(())
}

/// One momentum-SGD step over every registered parameter:
/// `v ← μ·v − η·g; θ ← θ + v`. Every parameter must have a gradient.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
) -> Result<()> {
    sgd_momentum_step_subset(params, grads, state, |_| true)
}

/// Rescale `grads` so their combined L2 norm is at most `max_norm`,
/// preserving direction. Returns the pre-clip norm. Gradients at or below
/// the threshold are left bitwise untouched.
pub fn clip_grads_by_norm(grads: &mut ParamGrads, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!(
            "clip_grads_by_norm: max_norm must be positive, got {max_norm}"
        )));
    }
    let sq: f64 = grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for g in t.data_mut() {
                *g *= scale;
            }
        }
    }
    Ok(norm)
}

/// Rescale each gradient tensor independently so its own L2 norm is at most
/// `cap(name)`, preserving direction. Tensors at or below their cap are left
/// bitwise untouched. Unlike [`clip_grads_by_norm`], one oversized tensor
/// cannot eat the step budget of the others.
pub fn clip_grads_per_tensor(
    grads: &mut ParamGrads,
    cap: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, t) in grads.iter_mut() {
        let max_norm = cap(name);
        if !(max_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_grads_per_tensor: cap for `{name}` must be positive, got {max_norm}"
            )));
        }
        let norm = t.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in t.data_mut() {
                *g *= scale;
            }
        }
    }
    Ok(())
}

/// Momentum-SGD step restricted to parameters whose name passes `include`.
/// Excluded parameters keep both their value and their velocity.
pub fn sgd_momentum_step_subset(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    include: impl Fn(&str) -> bool,
) -> Result<()> {
    let names: Vec<String> = params
        .names()
        .filter(|n| include(n))
        .map(String::from)
        .collect();
    for name in &names {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        step_one(name, params.get_mut(name)?, grad, state)?;
    }
    Ok(())
}
