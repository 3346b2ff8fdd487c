use super::params::ParamSet;
use super::tensor::{Result, TensorError};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient (applied as `lr * wd * w`).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers aligned with a [`ParamSet`]'s order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f64> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| {
            p.iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

/// One bias-corrected Adam update using the gradients stored on `params`
/// (a missing gradient counts as zero). Gradients are validated first, so
/// a non-finite entry aborts the step before any parameter changes.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(TensorError::Invalid(format!(
            "optimizer state holds {} buffers for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (name, p) in params.iter() {
        if let Some(g) = p.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient(name.to_string()));
            }
        }
    }
    state.step += 1;
    let cfg = state.config;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::one() - T::of(cfg.beta1.powi(state.step as i32));
    let bc2 = T::one() - T::of(cfg.beta2.powi(state.step as i32));
    let (lr, eps, wd) = (T::of(cfg.lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    for (idx, (_, p)) in params.iter_mut().enumerate() {
        let grad = p.grad().map(<[T]>::to_vec);
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        let data = p.data_mut();
        for k in 0..data.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[k]);
            m[k] = b1 * m[k] + (T::one() - b1) * g;
            v[k] = b2 * v[k] + (T::one() - b2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            data[k] = data[k] - lr * wd * data[k] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
