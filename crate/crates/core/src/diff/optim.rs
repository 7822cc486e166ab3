//! Adaptive-moment optimizer with global gradient-norm clipping.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 100.0,
        }
    }
}

/// Moment accumulators, one pair per parameter of the store it was built for.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub(crate) first: Vec<Tensor<T>>,
    pub(crate) second: Vec<Tensor<T>>,
}

/// Diagnostics from one [`Adam::step`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0 && config.clip_norm > 0.0 && config.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {config:?}")));
        }
        let zeros: Vec<_> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Ok(Self {
            config,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// Clips gradients to the global norm, applies the update, increments
    /// the step counter and zeroes gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<StepReport> {
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        let norm = store.grad_norm().to_f64c();
        let clip = self.config.clip_norm;
        let factor = if norm > clip { clip / norm } else { 1.0 };
        if factor < 1.0 {
            let f = T::from_f64c(factor);
            for id in store.ids().collect::<Vec<_>>() {
                store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g = *g * f);
            }
        }
        let clipped_norm = store.grad_norm().to_f64c();

        store.bump_step();
        let t = store.step() as i32;
        let cfg = self.config;
        let (b1, b2) = (T::from_f64c(cfg.beta1), T::from_f64c(cfg.beta2));
        let bc1 = T::from_f64c(1.0 - cfg.beta1.powi(t));
        let bc2 = T::from_f64c(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64c(cfg.lr);
        let eps = T::from_f64c(cfg.eps);
        let one = T::one();
        for id in store.ids().collect::<Vec<_>>() {
            if !store.trainable(id) {
                continue;
            }
            let grad = store.grad(id).data();
            let m = self.first[id.0].data_mut();
            if grad.iter().all(|g| g.is_zero()) && m.iter().all(|x| x.is_zero()) {
                // Never-touched parameters (e.g. zero-coefficient heads) stay exact.
                continue;
            }
            let grad = grad.to_vec();
            let v = self.second[id.0].data_mut();
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(StepReport {
            grad_norm: norm,
            clipped_norm,
        })
    }
}
