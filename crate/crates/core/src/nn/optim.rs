use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradSet, NnError, ParamSet, Scalar, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::new(1e-3, 0.9, 0.999)
    }
}

/// Moment accumulators for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
///
/// Keys absent from `grads` are treated as zero gradients. Fails without
/// touching `params` on a shape mismatch, and reports non-finite results.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &GradSet<T>,
    state: &mut OptimState<T>,
) -> Result<(), NnError> {
    for (key, g) in grads.iter() {
        if let Some(p) = params.get(key) {
            if p.shape() != g.shape() {
                return Err(NnError::Shape(format!(
                    "gradient for `{key}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as f64;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let step_size = T::from_f64(cfg.lr / (1.0 - cfg.beta1.powf(t)));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t));
    let eps = T::from_f64(cfg.eps);

    for (key, p) in params.iter_mut() {
        let m = state
            .first
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .second
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let grad = grads.get(key);
        for i in 0..p.len() {
            let gi = grad.map_or(T::zero(), |g| g.data()[i]);
            let mi = b1 * m.data()[i] + one_b1 * gi;
            let vi = b2 * v.data()[i] + one_b2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let denom = (vi / bc2).sqrt() + eps;
            p.data_mut()[i] = p.data()[i] - step_size * mi / denom;
        }
        if !p.is_finite() {
            return Err(NnError::NonFinite {
                op: "adam_step".into(),
                path: key.clone(),
            });
        }
    }
    Ok(())
}
