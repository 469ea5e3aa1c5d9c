//! Convolutional stream: a stride-4 stem followed by four stages of
//! bottleneck residual blocks, producing features at strides 4, 8, 16 and 32.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CtoError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{delegate_module, ConvBn, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(CtoError::Config("channel counts must be positive".into()));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(CtoError::Config("every stage needs at least one block".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(CtoError::Config(format!(
                "stage channels must be nondecreasing, got {:?}",
                self.stage_channels
            )));
        }
        Ok(())
    }
}

/// Width of the 3x3 convolution inside a bottleneck block.
pub fn bottleneck_width(out_channels: usize) -> usize {
    (out_channels / 4).max(1)
}

#[derive(Debug, Clone)]
struct Bottleneck<T> {
    reduce: ConvBn<T>,
    spatial: ConvBn<T>,
    expand: ConvBn<T>,
    shortcut: Option<ConvBn<T>>,
}

impl<T: Scalar> Bottleneck<T> {
    fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, stride: usize, rng: &mut R) -> Self {
        let mid = bottleneck_width(output);
        Self {
            reduce: ConvBn::new(&format!("{name}.reduce"), input, mid, 1, 1, true, rng),
            spatial: ConvBn::new(&format!("{name}.spatial"), mid, mid, 3, stride, true, rng),
            expand: ConvBn::new(&format!("{name}.expand"), mid, output, 1, 1, false, rng),
            shortcut: (input != output || stride != 1)
                .then(|| ConvBn::new(&format!("{name}.shortcut"), input, output, 1, stride, false, rng)),
        }
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(g, x)?;
        let y = self.spatial.forward(g, y)?;
        let y = self.expand.forward(g, y)?;
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(g, x)?,
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

delegate_module!(Bottleneck { reduce, spatial, expand, shortcut });

/// The four encoder maps, finest first.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    pub const STRIDES: [usize; 4] = PYRAMID_STRIDES;
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    config: BackboneConfig,
    stem: ConvBn<T>,
    stages: Vec<Vec<Bottleneck<T>>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new("backbone.stem", 3, config.stem_channels, 3, 2, true, rng);
        let mut stages = Vec::with_capacity(4);
        let mut input = config.stem_channels;
        for (s, (&out, &blocks)) in config
            .stage_channels
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let stride = if s == 0 { 1 } else { 2 };
            let stage = (0..blocks)
                .map(|b| {
                    let name = format!("backbone.stage{}.block{b}", s + 1);
                    if b == 0 {
                        Bottleneck::new(&name, input, out, stride, rng)
                    } else {
                        Bottleneck::new(&name, out, out, 1, rng)
                    }
                })
                .collect();
            stages.push(stage);
            input = out;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<FeaturePyramid> {
        let [_, c, h, w] = g.value(x).dims4()?;
        if c != 3 {
            return shape_err(format!("backbone expects 3 input channels, got {c}"));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return shape_err(format!("input size {h}x{w} must be a positive multiple of 32"));
        }
        let y = self.stem.forward(g, x)?;
        let mut y = g.max_pool(y, 3, 2, 1)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                y = block.forward(g, y)?;
            }
            levels.push(y);
        }
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("four stages"),
        })
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit_params(f);
        self.stages.iter().for_each(|s| s.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_params_mut(f);
        self.stages.iter_mut().for_each(|s| s.visit_params_mut(f));
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem.visit_buffers(f);
        self.stages.iter().for_each(|s| s.visit_buffers(f));
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_buffers_mut(f);
        self.stages.iter_mut().for_each(|s| s.visit_buffers_mut(f));
    }
}

/// Trainable scalar count of a backbone built from `cfg`, without allocating it.
pub fn backbone_param_count(cfg: &BackboneConfig) -> Result<usize> {
    cfg.validate()?;
    let conv_bn = |i: usize, o: usize, k: usize| i * o * k * k + 2 * o;
    let mut total = conv_bn(3, cfg.stem_channels, 3);
    let mut input = cfg.stem_channels;
    for (s, (&out, &blocks)) in cfg.stage_channels.iter().zip(&cfg.blocks_per_stage).enumerate() {
        let mid = bottleneck_width(out);
        for b in 0..blocks {
            let (i, stride) = if b == 0 { (input, if s == 0 { 1 } else { 2 }) } else { (out, 1) };
            total += conv_bn(i, mid, 1) + conv_bn(mid, mid, 3) + conv_bn(mid, out, 1);
            if i != out || stride != 1 {
                total += conv_bn(i, out, 1);
            }
        }
        input = out;
    }
    Ok(total)
}
