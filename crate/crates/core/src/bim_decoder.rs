//! Decoder: a bottleneck block followed by three upsampling stages that walk
//! strides 32 -> 16 -> 8 -> 4, each with its own segmentation head.
//!
//! A stage is either a boundary inject module (foreground path over the
//! boundary feature, skip feature and previous decoder feature, plus a
//! background path gated by `1 - sigmoid(a)`), or a plain concat-conv block.

use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{delegate_module, forward_seq, Conv2d, ConvBn, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DECODER_STAGES: usize = 3;

#[derive(Debug, Clone)]
pub struct Bim<T> {
    /// 1x1 projection of the previous decoder feature to one attention logit channel.
    pub attention: Conv2d<T>,
    pub foreground: Vec<ConvBn<T>>,
    pub background: Vec<ConvBn<T>>,
    pub fuse: ConvBn<T>,
}

impl<T: Scalar> Bim<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        boundary: usize,
        skip: usize,
        prev: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attention: Conv2d::new(&format!("{name}.attention"), prev, 1, 1, 1, true, rng),
            foreground: vec![
                ConvBn::relu(&format!("{name}.fg0"), boundary + skip + prev, out, 3, rng),
                ConvBn::relu(&format!("{name}.fg1"), out, out, 3, rng),
            ],
            background: vec![
                ConvBn::relu(&format!("{name}.bg0"), skip, out, 3, rng),
                ConvBn::relu(&format!("{name}.bg1"), out, out, 3, rng),
                ConvBn::relu(&format!("{name}.bg2"), out, out, 3, rng),
            ],
            fuse: ConvBn::relu(&format!("{name}.fuse"), 2 * out + prev, out, 3, rng),
        }
    }

    /// `Convs((1 - sigmoid(a)) * fc)` with the one-channel gate broadcast over channels.
    pub fn background_path(&mut self, g: &mut Graph<T>, fc: Var, attention_logits: Var) -> Result<Var> {
        let fg_attention = g.sigmoid(attention_logits);
        let bg_attention = g.one_minus(fg_attention);
        let gated = g.mul(fc, bg_attention)?;
        forward_seq(&mut self.background, g, gated)
    }

    /// `fb` is resized to the skip resolution and `fd_prev` upsampled to it.
    /// Returns the stage output and the attention logits.
    pub fn forward(&mut self, g: &mut Graph<T>, fb: Var, fc: Var, fd_prev: Var) -> Result<(Var, Var)> {
        let [_, _, h, w] = g.value(fc).dims4()?;
        let [_, _, ph, pw] = g.value(fd_prev).dims4()?;
        if ph * 2 != h || pw * 2 != w {
            return shape_err(format!(
                "previous decoder feature {ph}x{pw} is not half of the skip {h}x{w}"
            ));
        }
        let fb = g.resize_bilinear(fb, h, w)?;
        let prev = g.resize_bilinear(fd_prev, h, w)?;
        let a = self.attention.forward(g, prev)?;
        let cat = g.concat(&[fb, fc, prev], 1)?;
        let fg = forward_seq(&mut self.foreground, g, cat)?;
        let bg = self.background_path(g, fc, a)?;
        let cat = g.concat(&[fg, bg, prev], 1)?;
        Ok((self.fuse.forward(g, cat)?, a))
    }
}

impl<T: Scalar> Module<T> for Bim<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.attention.visit_params(f);
        self.foreground.visit_params(f);
        self.background.visit_params(f);
        self.fuse.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.attention.visit_params_mut(f);
        self.foreground.visit_params_mut(f);
        self.background.visit_params_mut(f);
        self.fuse.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.foreground.visit_buffers(f);
        self.background.visit_buffers(f);
        self.fuse.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.foreground.visit_buffers_mut(f);
        self.background.visit_buffers_mut(f);
        self.fuse.visit_buffers_mut(f);
    }
}

/// Upsample, concatenate with the skip feature, two Conv-BN-ReLU layers.
#[derive(Debug, Clone)]
pub struct PlainStage<T> {
    pub convs: Vec<ConvBn<T>>,
}

impl<T: Scalar> PlainStage<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, skip: usize, prev: usize, out: usize, rng: &mut R) -> Self {
        Self {
            convs: vec![
                ConvBn::relu(&format!("{name}.conv0"), skip + prev, out, 3, rng),
                ConvBn::relu(&format!("{name}.conv1"), out, out, 3, rng),
            ],
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, fc: Var, fd_prev: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(fc).dims4()?;
        let prev = g.resize_bilinear(fd_prev, h, w)?;
        let cat = g.concat(&[fc, prev], 1)?;
        forward_seq(&mut self.convs, g, cat)
    }
}

delegate_module!(PlainStage { convs });

#[derive(Debug, Clone)]
pub enum Stage<T> {
    Inject(Bim<T>),
    Plain(PlainStage<T>),
}

impl<T: Scalar> Module<T> for Stage<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Stage::Inject(s) => s.visit_params(f),
            Stage::Plain(s) => s.visit_params(f),
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Stage::Inject(s) => s.visit_params_mut(f),
            Stage::Plain(s) => s.visit_params_mut(f),
        }
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            Stage::Inject(s) => s.visit_buffers(f),
            Stage::Plain(s) => s.visit_buffers(f),
        }
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            Stage::Inject(s) => s.visit_buffers_mut(f),
            Stage::Plain(s) => s.visit_buffers_mut(f),
        }
    }
}

/// Decoder features and per-stage logits, coarsest stage first.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub features: Vec<Var>,
    /// Logits at each stage's native resolution (strides 16, 8, 4).
    pub native_logits: Vec<Var>,
    /// The same logits bilinearly upsampled to the input resolution.
    pub logits: Vec<Var>,
    /// Attention logits of the inject stages (empty for plain stages).
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DecoderLayout {
    pub skip_channels: [usize; 3],
    pub bottleneck_in: usize,
    pub boundary_channels: Option<usize>,
    pub channels: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder<T> {
    bottleneck: ConvBn<T>,
    stages: Vec<Stage<T>>,
    heads: Vec<Conv2d<T>>,
}

impl<T: Scalar> Decoder<T> {
    /// `skip_channels` are the channel counts of the stride-16, 8 and 4 encoder maps.
    /// With `boundary_channels` set, every stage is an inject module.
    pub fn new<R: Rng + ?Sized>(layout: &DecoderLayout, rng: &mut R) -> Self {
        let d = layout.channels;
        let bottleneck = ConvBn::relu("decoder.bottleneck", layout.bottleneck_in, d, 3, rng);
        let stages = layout
            .skip_channels
            .iter()
            .enumerate()
            .map(|(j, &skip)| {
                let name = format!("decoder.stage{}", j + 1);
                match layout.boundary_channels {
                    Some(fb) => Stage::Inject(Bim::new(&name, fb, skip, d, d, rng)),
                    None => Stage::Plain(PlainStage::new(&name, skip, d, d, rng)),
                }
            })
            .collect();
        let heads = (0..DECODER_STAGES)
            .map(|j| Conv2d::new(&format!("decoder.head{}", j + 1), d, layout.classes, 1, 1, true, rng))
            .collect();
        Self {
            bottleneck,
            stages,
            heads,
        }
    }

    /// `context` is an optional extra map, average-pooled to the stride-32
    /// resolution and concatenated with the deepest encoder feature.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        pyramid: &FeaturePyramid,
        context: Option<Var>,
        boundary: Option<Var>,
        out_size: (usize, usize),
    ) -> Result<DecoderState> {
        let [f1, f2, f3, f4] = pyramid.levels;
        let [_, _, h4, w4] = g.value(f4).dims4()?;
        let mut x = f4;
        if let Some(ctx) = context {
            let [_, _, ch, cw] = g.value(ctx).dims4()?;
            if ch % h4 != 0 || ch / h4 != cw / w4 || cw % w4 != 0 {
                return shape_err(format!("context {ch}x{cw} does not pool onto {h4}x{w4}"));
            }
            let pooled = g.avg_pool(ctx, ch / h4)?;
            x = g.concat(&[f4, pooled], 1)?;
        }
        let mut prev = self.bottleneck.forward(g, x)?;
        let mut state = DecoderState {
            features: Vec::with_capacity(3),
            native_logits: Vec::with_capacity(3),
            logits: Vec::with_capacity(3),
            attention: Vec::new(),
        };
        for ((stage, head), skip) in self.stages.iter_mut().zip(&self.heads).zip([f3, f2, f1]) {
            prev = match stage {
                Stage::Inject(bim) => {
                    let Some(fb) = boundary else {
                        return shape_err("inject stages need a boundary feature");
                    };
                    let (y, a) = bim.forward(g, fb, skip, prev)?;
                    state.attention.push(a);
                    y
                }
                Stage::Plain(p) => p.forward(g, skip, prev)?,
            };
            let logits = head.forward(g, prev)?;
            state.features.push(prev);
            state.native_logits.push(logits);
            state.logits.push(g.resize_bilinear(logits, out_size.0, out_size.1)?);
        }
        Ok(state)
    }
}

delegate_module!(Decoder { bottleneck, stages, heads });
