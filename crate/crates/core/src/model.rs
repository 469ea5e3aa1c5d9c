//! Assembly of the five ablation variants from the encoder, transformer,
//! boundary and decoder pieces.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::bem::{BoundaryKind, BoundaryModule};
use crate::bim_decoder::{Decoder, DecoderLayout, DecoderState};
use crate::error::{shape_err, CtoError, Result};
use crate::graph::{Graph, Var};
use crate::lightvit::{LightVit, LightVitConfig, LightVitOutput};
use crate::nn::delegate_module;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "cnn+vit")]
    CnnVit,
    #[serde(rename = "cnn+vit+cbm")]
    CnnVitCbm,
    #[serde(rename = "cnn+vit+bem")]
    CnnVitBem,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Cnn,
        Variant::CnnVit,
        Variant::CnnVitCbm,
        Variant::CnnVitBem,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cnn => "cnn",
            Variant::CnnVit => "cnn+vit",
            Variant::CnnVitCbm => "cnn+vit+cbm",
            Variant::CnnVitBem => "cnn+vit+bem",
            Variant::Full => "full",
        }
    }

    pub fn has_vit(self) -> bool {
        self != Variant::Cnn
    }

    /// Kind of boundary branch, if the variant supervises boundaries at all.
    pub fn boundary(self) -> Option<BoundaryKind> {
        match self {
            Variant::Cnn | Variant::CnnVit => None,
            Variant::CnnVitCbm => Some(BoundaryKind::Plain),
            Variant::CnnVitBem | Variant::Full => Some(BoundaryKind::Sobel),
        }
    }

    /// Whether decoder stages are boundary inject modules.
    pub fn injects(self) -> bool {
        self == Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CtoError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| CtoError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub vit_dmodel: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Channels of the fused transformer feature.
    pub vit_channels: usize,
    /// Foreground classes. One class is predicted with a single sigmoid map,
    /// more with a softmax over `classes + 1` channels.
    pub classes: usize,
    pub boundary_width: usize,
    pub boundary_channels: usize,
    pub decoder_channels: usize,
    /// Square input side; position embeddings are sized from it.
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            backbone: BackboneConfig {
                stem_channels: 32,
                stage_channels: [64, 128, 256, 512],
                blocks_per_stage: [2, 2, 2, 2],
            },
            vit_dmodel: 64,
            heads: 4,
            mlp_ratio: 2,
            vit_channels: 64,
            classes: 1,
            boundary_width: 1,
            boundary_channels: 32,
            decoder_channels: 64,
            image_size: 256,
        }
    }
}

impl ModelConfig {
    /// Small enough to train on a CPU in minutes.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            backbone: BackboneConfig::tiny(),
            vit_dmodel: 16,
            heads: 2,
            mlp_ratio: 2,
            vit_channels: 16,
            classes: 1,
            boundary_width: 1,
            boundary_channels: 32,
            decoder_channels: 64,
            image_size: 64,
        }
    }

    pub fn output_channels(&self) -> usize {
        if self.classes == 1 {
            1
        } else {
            self.classes + 1
        }
    }

    pub fn vit_config(&self) -> LightVitConfig {
        LightVitConfig {
            in_channels: self.backbone.stage_channels[0],
            d_model: self.vit_dmodel,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            out_channels: self.vit_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let positive = [
            ("classes", self.classes),
            ("boundary_width", self.boundary_width),
            ("boundary_channels", self.boundary_channels),
            ("decoder_channels", self.decoder_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CtoError::Config(format!("{name} must be positive")));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(CtoError::Config(format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.variant.has_vit() {
            self.vit_config().validate()?;
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct SegOutput {
    /// Interior logits of the three decoder heads at input resolution, coarsest first.
    pub interior: Vec<Var>,
    /// Boundary logits at stride 4.
    pub boundary: Option<Var>,
    pub decoder: DecoderState,
    pub vit: Option<LightVitOutput>,
}

#[derive(Debug, Clone)]
pub struct CtoModel<T> {
    config: ModelConfig,
    pub backbone: Backbone<T>,
    pub vit: Option<LightVit<T>>,
    pub boundary: Option<BoundaryModule<T>>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> CtoModel<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.backbone.stage_channels;
        let backbone = Backbone::new(&config.backbone, rng)?;
        let vit = if config.variant.has_vit() {
            let side = config.image_size / 4;
            Some(LightVit::fitted(&config.vit_config(), (side, side), rng)?)
        } else {
            None
        };
        let boundary = config
            .variant
            .boundary()
            .map(|kind| BoundaryModule::new(kind, c[0], c[3], config.boundary_channels, rng));
        let layout = DecoderLayout {
            skip_channels: [c[2], c[1], c[0]],
            bottleneck_in: c[3] + if vit.is_some() { config.vit_channels } else { 0 },
            boundary_channels: config.variant.injects().then_some(config.boundary_channels),
            channels: config.decoder_channels,
            classes: config.output_channels(),
        };
        let decoder = Decoder::new(&layout, rng);
        Ok(Self {
            config: config.clone(),
            backbone,
            vit,
            boundary,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// `x` is `[B, 3, S, S]` with `S` the configured image size.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<SegOutput> {
        let [_, _, h, w] = g.value(x).dims4()?;
        if self.vit.is_some() && (h, w) != (self.config.image_size, self.config.image_size) {
            return shape_err(format!(
                "model built for {0}x{0} inputs, got {h}x{w}",
                self.config.image_size
            ));
        }
        let pyramid = self.backbone.forward(g, x)?;
        let [f1, _, _, f4] = pyramid.levels;
        let vit = match self.vit.as_mut() {
            Some(v) => Some(v.forward(g, f1)?),
            None => None,
        };
        let boundary = match self.boundary.as_mut() {
            Some(b) => Some(b.forward(g, f1, f4)?),
            None => None,
        };
        let inject = if self.config.variant.injects() {
            boundary.as_ref().map(|b| b.feature)
        } else {
            None
        };
        let decoder = self
            .decoder
            .forward(g, &pyramid, vit.as_ref().map(|v| v.feature), inject, (h, w))?;
        Ok(SegOutput {
            interior: decoder.logits.clone(),
            boundary: boundary.map(|b| b.logits),
            decoder,
            vit,
        })
    }
}

delegate_module!(CtoModel {
    backbone,
    vit,
    boundary,
    decoder
});

/// Builds the model for `config`; a thin alias of [`CtoModel::new`].
pub fn build_model<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<CtoModel<T>> {
    CtoModel::new(config, rng)
}
