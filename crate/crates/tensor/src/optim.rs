//! Adam with classic (coupled) L2 weight decay, and global-norm clipping.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::lit(lr);
    let eps = T::lit(cfg.eps);
    let wd = T::lit(cfg.weight_decay);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..param.len() {
        let g = grad[i] + wd * param[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Optimizer over the trainable parameters of a [`ParamStore`]. State is
/// created lazily the first time a parameter is updated, so parameters that
/// start frozen begin bias correction from their first real step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    state: HashMap<String, AdamState<T>>,
    skipped: u64,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
            skipped: 0,
            steps: 0,
        }
    }

    /// Number of steps skipped because a gradient was non-finite.
    pub fn skipped_steps(&self) -> u64 {
        self.skipped
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<T>> {
        self.state.get(name)
    }

    pub fn states(&self) -> impl Iterator<Item = (&str, &AdamState<T>)> {
        self.state.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert_state(&mut self, name: &str, state: AdamState<T>) {
        self.state.insert(name.to_string(), state);
    }

    /// Updates every trainable parameter with the learning rate returned by
    /// `lr_for(name)`. Returns `false` (and counts a skip) when any trainable
    /// gradient is non-finite; nothing is modified in that case.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_for: impl Fn(&str) -> f64) -> bool {
        let finite = store
            .params()
            .filter(|(_, p)| p.trainable)
            .all(|(_, p)| p.grad.all_finite());
        if !finite {
            self.skipped += 1;
            return false;
        }
        let ids: Vec<ParamId> = store
            .params()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let p = store.param_mut(id);
            let lr = lr_for(&p.name);
            let st = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| AdamState::zeros(p.value.shape()));
            let grad = p.grad.data().to_vec();
            adam_step(p.value.data_mut(), &grad, st, lr, &self.config);
        }
        self.steps += 1;
        true
    }
}

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm().to_f64().unwrap_or(f64::NAN);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for p in store.params_mut().filter(|p| p.trainable) {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}
