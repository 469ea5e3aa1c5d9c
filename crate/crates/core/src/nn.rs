//! Parameters and the small set of layers the network is assembled from.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

/// A trainable tensor with a stable hierarchical name.
#[derive(Debug, Clone)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }
}

/// Anything that owns parameters and (optionally) non-trainable buffers.
pub trait Module<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Non-trainable state such as running statistics and fixed filters.
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value().numel());
        n
    }

    fn buffer_count(&self) -> usize {
        let mut n = 0;
        self.visit_buffers(&mut |_, b| n += b.numel());
        n
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.iter().for_each(|m| m.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(|m| m.visit_params_mut(f));
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.iter().for_each(|m| m.visit_buffers(f));
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.iter_mut().for_each(|m| m.visit_buffers_mut(f));
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(m) = self {
            m.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = self {
            m.visit_params_mut(f);
        }
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(m) = self {
            m.visit_buffers(f);
        }
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit_buffers_mut(f);
        }
    }
}

/// Implements [`Module`] for a struct by delegating to the listed fields.
macro_rules! delegate_module {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit_params(&self, f: &mut dyn FnMut(&$crate::nn::Param<T>)) {
                $( self.$field.visit_params(f); )*
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut $crate::nn::Param<T>)) {
                $( self.$field.visit_params_mut(f); )*
            }
            fn visit_buffers(&self, f: &mut dyn FnMut(&str, &$crate::tensor::Tensor<T>)) {
                $( self.$field.visit_buffers(f); )*
            }
            fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<T>)) {
                $( self.$field.visit_buffers_mut(f); )*
            }
        }
    };
}
pub(crate) use delegate_module;

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: Conv2dSpec,
}

impl<T: Scalar> Conv2d<T> {
    /// Square kernel with "same" padding for odd sizes. Weights ~ N(0, 2/fan_in).
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::randn(&[out_ch, in_ch, kernel, kernel], std, rng),
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch]))),
            spec: Conv2dSpec {
                stride,
                padding: kernel / 2,
                groups: 1,
            },
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    mean_name: String,
    var_name: String,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            mean_name: format!("{name}.running_mean"),
            var_name: format!("{name}.running_var"),
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let [_, c, _, _] = g.value(x).dims4()?;
        if c != self.gamma.value().numel() {
            return shape_err(format!(
                "batch norm over {} channels got {c}",
                self.gamma.value().numel()
            ));
        }
        let eps = T::lit(BN_EPS);
        let xhat = if g.training() {
            let (xhat, mean, var) = g.channel_norm(x, eps)?;
            let m = T::lit(BN_MOMENTUM);
            for (r, v) in self.running_mean.data_mut().iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, v) in self.running_var.data_mut().iter_mut().zip(var) {
                *r = (T::one() - m) * *r + m * v;
            }
            xhat
        } else {
            let scale: Vec<T> = self
                .running_var
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            let shift: Vec<T> = self
                .running_mean
                .data()
                .iter()
                .zip(&scale)
                .map(|(&m, &s)| -m * s)
                .collect();
            let scale = g.input(Tensor::from_vec(&[1, c, 1, 1], scale)?);
            let shift = g.input(Tensor::from_vec(&[1, c, 1, 1], shift)?);
            let y = g.mul(x, scale)?;
            g.add(y, shift)?
        };
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let gamma = g.reshape(gamma, &[1, c, 1, 1])?;
        let beta = g.reshape(beta, &[1, c, 1, 1])?;
        let y = g.mul(xhat, gamma)?;
        g.add(y, beta)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&self.mean_name, &self.running_mean);
        f(&self.var_name, &self.running_var);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&self.mean_name, &mut self.running_mean);
        f(&self.var_name, &mut self.running_var);
    }
}

/// Convolution (no bias) followed by batch normalization and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
}

impl<T: Scalar> ConvBn<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, kernel, stride, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
            relu,
        }
    }

    pub fn relu<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(name, in_ch, out_ch, kernel, 1, true, rng)
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

delegate_module!(ConvBn { conv, bn });

/// Runs a list of [`ConvBn`] layers in sequence.
pub fn forward_seq<T: Scalar>(layers: &mut [ConvBn<T>], g: &mut Graph<T>, x: Var) -> Result<Var> {
    layers.iter_mut().try_fold(x, |x, l| l.forward(g, x))
}

/// Affine map over the last axis of a `[..., in]` tensor.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::randn(&[input, output], std, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (din, dout) = (self.in_features(), self.out_features());
        if shape.last() != Some(&din) {
            return shape_err(format!("linear expects last dim {din}, got {shape:?}"));
        }
        let rows = shape.iter().product::<usize>() / din;
        let flat = g.reshape(x, &[1, rows, din])?;
        let w = g.param(&self.weight);
        let w = g.reshape(w, &[1, din, dout])?;
        let y = g.matmul(flat, w)?;
        let b = g.param(&self.bias);
        let y = g.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("nonempty shape") = dout;
        g.reshape(y, &out_shape)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.row_norm(x, T::lit(BN_EPS));
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let y = g.mul(y, gamma)?;
        g.add(y, beta)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn batch_norm_switches_between_batch_and_running_stats() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        let x = Tensor::<f64>::uniform(&[3, 2, 2, 2], 1.0, 3.0, &mut rng);
        let mut g = Graph::new(true);
        let xv = g.input(x.clone());
        let y = bn.forward(&mut g, xv).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 24.0;
        assert!(mean.abs() < 1e-12);
        assert!(bn.running_mean.data()[0] > 0.1);
        // fresh layer in eval mode is the identity
        let mut fresh = BatchNorm2d::<f64>::new("bn", 2);
        let mut g = Graph::new(false);
        let xv = g.input(x.clone());
        let y = fresh.forward(&mut g, xv).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_applies_over_last_axis() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::<f64>::new("l", 3, 2, &mut rng);
        let mut g = Graph::new(true);
        let x = g.input(Tensor::ones(&[2, 4, 3]));
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 2]);
        let w = lin.weight.value();
        let expect = w.at(&[0, 1]) + w.at(&[1, 1]) + w.at(&[2, 1]);
        assert!((g.value(y).at(&[1, 3, 1]) - expect).abs() < 1e-12);
        assert_eq!(lin.param_count(), 8);
    }
}
