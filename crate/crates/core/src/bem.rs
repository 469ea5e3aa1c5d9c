//! Boundary module: fixed Sobel filters gate the stride-4 and stride-32 encoder
//! features, which are fused into a boundary feature with a supervised
//! one-channel boundary readout. The plain variant skips the Sobel gating.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Padding, Var};
use crate::nn::{forward_seq, Conv2d, ConvBn, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SOBEL_X: [[i8; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
pub const SOBEL_Y: [[i8; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];

/// The two fixed first-derivative kernels. They are never graph parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SobelKernels<T> {
    kx: Tensor<T>,
    ky: Tensor<T>,
}

impl<T: Scalar> Default for SobelKernels<T> {
    fn default() -> Self {
        let build = |k: [[i8; 3]; 3]| {
            Tensor::from_vec(&[3, 3], k.iter().flatten().map(|&v| T::lit(v as f64)).collect())
                .expect("3x3 kernel")
        };
        Self {
            kx: build(SOBEL_X),
            ky: build(SOBEL_Y),
        }
    }
}

impl<T: Scalar> SobelKernels<T> {
    pub fn kx(&self) -> &Tensor<T> {
        &self.kx
    }

    pub fn ky(&self) -> &Tensor<T> {
        &self.ky
    }

    /// True when both kernels still hold the exact Sobel values.
    pub fn is_pristine(&self) -> bool {
        *self == Self::default()
    }

    fn taps(t: &Tensor<T>) -> [T; 9] {
        t.data().try_into().expect("3x3 kernel")
    }
}

/// Per-channel horizontal and vertical Sobel responses, stride 1, edge-replicated borders.
pub fn sobel_gradients<T: Scalar>(g: &mut Graph<T>, kernels: &SobelKernels<T>, f: Var) -> Result<(Var, Var)> {
    let mx = g.fixed_depthwise3x3(f, SobelKernels::taps(&kernels.kx), Padding::Replicate)?;
    let my = g.fixed_depthwise3x3(f, SobelKernels::taps(&kernels.ky), Padding::Replicate)?;
    Ok((mx, my))
}

/// `f * sigmoid(proj([mx, my]))` where `proj` maps the 2C gradient channels back to C.
pub fn edge_enhance<T: Scalar>(
    g: &mut Graph<T>,
    kernels: &SobelKernels<T>,
    proj: &Conv2d<T>,
    f: Var,
) -> Result<Var> {
    let (mx, my) = sobel_gradients(g, kernels, f)?;
    let mxy = g.concat(&[mx, my], 1)?;
    let logits = proj.forward(g, mxy)?;
    let gate = g.sigmoid(logits);
    g.mul(f, gate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    /// Sobel-gated inputs.
    Sobel,
    /// Same fusion path without the Sobel gating.
    Plain,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryFeature {
    /// Fused boundary feature at the stride-4 resolution.
    pub feature: Var,
    /// One-channel boundary logits at the stride-4 resolution.
    pub logits: Var,
}

#[derive(Debug, Clone)]
struct Gates<T> {
    kernels: SobelKernels<T>,
    low: Conv2d<T>,
    high: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct BoundaryModule<T> {
    kind: BoundaryKind,
    gates: Option<Gates<T>>,
    reduce_high: Conv2d<T>,
    match_high: Conv2d<T>,
    match_low: Conv2d<T>,
    fuse: Vec<ConvBn<T>>,
    head: Conv2d<T>,
    channels: usize,
}

impl<T: Scalar> BoundaryModule<T> {
    /// `low` and `high` are the channel counts of the stride-4 and stride-32 inputs;
    /// `channels` is the width of the fused boundary feature.
    pub fn new<R: Rng + ?Sized>(kind: BoundaryKind, low: usize, high: usize, channels: usize, rng: &mut R) -> Self {
        let gates = (kind == BoundaryKind::Sobel).then(|| {
            let mut low_gate = Conv2d::new("bem.gate_low", 2 * low, low, 1, 1, true, rng);
            let mut high_gate = Conv2d::new("bem.gate_high", 2 * high, high, 1, 1, true, rng);
            // Sobel responses are large; start the gates near sigmoid's linear range
            for c in [&mut low_gate, &mut high_gate] {
                c.weight.value_mut().data_mut().iter_mut().for_each(|v| *v *= T::lit(0.1));
            }
            Gates {
                kernels: SobelKernels::default(),
                low: low_gate,
                high: high_gate,
            }
        });
        let prefix = match kind {
            BoundaryKind::Sobel => "bem",
            BoundaryKind::Plain => "cbm",
        };
        Self {
            kind,
            gates,
            reduce_high: Conv2d::new(&format!("{prefix}.reduce_high"), high, channels, 1, 1, true, rng),
            match_high: Conv2d::new(&format!("{prefix}.match_high"), channels, channels, 1, 1, true, rng),
            match_low: Conv2d::new(&format!("{prefix}.match_low"), low, channels, 1, 1, true, rng),
            fuse: vec![
                ConvBn::relu(&format!("{prefix}.fuse0"), 2 * channels, channels, 3, rng),
                ConvBn::relu(&format!("{prefix}.fuse1"), channels, channels, 3, rng),
            ],
            head: Conv2d::new(&format!("{prefix}.head"), channels, 1, 1, 1, true, rng),
            channels,
        }
    }

    pub fn kind(&self) -> BoundaryKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sobel(&self) -> Option<&SobelKernels<T>> {
        self.gates.as_ref().map(|g| &g.kernels)
    }

    /// Trainable scalars spent on the Sobel gate projections (zero for the plain variant).
    pub fn gate_param_count(&self) -> usize {
        self.gates
            .as_ref()
            .map_or(0, |g| g.low.param_count() + g.high.param_count())
    }

    pub fn forward(&mut self, g: &mut Graph<T>, f1: Var, f4: Var) -> Result<BoundaryFeature> {
        let [b1, _, h, w] = g.value(f1).dims4()?;
        let [b4, _, h4, w4] = g.value(f4).dims4()?;
        if b1 != b4 || h != h4 * 8 || w != w4 * 8 {
            return shape_err(format!(
                "boundary module expects the high-level map at 1/8 of {h}x{w}, got {h4}x{w4}"
            ));
        }
        let (e1, e4) = match &self.gates {
            Some(gates) => (
                edge_enhance(g, &gates.kernels, &gates.low, f1)?,
                edge_enhance(g, &gates.kernels, &gates.high, f4)?,
            ),
            None => (f1, f4),
        };
        let high = self.reduce_high.forward(g, e4)?;
        let high = g.resize_bilinear(high, h, w)?;
        let high = self.match_high.forward(g, high)?;
        let low = self.match_low.forward(g, e1)?;
        let cat = g.concat(&[low, high], 1)?;
        let feature = forward_seq(&mut self.fuse, g, cat)?;
        let logits = self.head.forward(g, feature)?;
        Ok(BoundaryFeature { feature, logits })
    }
}

impl<T: Scalar> Module<T> for BoundaryModule<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(gates) = &self.gates {
            gates.low.visit_params(f);
            gates.high.visit_params(f);
        }
        self.reduce_high.visit_params(f);
        self.match_high.visit_params(f);
        self.match_low.visit_params(f);
        self.fuse.visit_params(f);
        self.head.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(gates) = &mut self.gates {
            gates.low.visit_params_mut(f);
            gates.high.visit_params_mut(f);
        }
        self.reduce_high.visit_params_mut(f);
        self.match_high.visit_params_mut(f);
        self.match_low.visit_params_mut(f);
        self.fuse.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(gates) = &self.gates {
            f("bem.sobel.kx", &gates.kernels.kx);
            f("bem.sobel.ky", &gates.kernels.ky);
        }
        self.fuse.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        // the Sobel kernels are exposed read-only
        self.fuse.visit_buffers_mut(f);
    }
}
