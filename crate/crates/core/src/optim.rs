//! Adam with a constant learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::Grads;
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, grads: &Grads<T>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let t = self.step as i32;
        let bias1 = T::lit(1.0 - c.beta1.powi(t));
        let bias2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params_mut(&mut |p| {
            let Some(grad) = grads.param(p.id()) else {
                return;
            };
            let shape = p.value().shape().to_vec();
            let m = first
                .entry(p.name().to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = second
                .entry(p.name().to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, (w, &gi)) in p.value_mut().data_mut().iter_mut().zip(grad.data()).enumerate() {
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                let mhat = md[i] / bias1;
                let vhat = vd[i] / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
