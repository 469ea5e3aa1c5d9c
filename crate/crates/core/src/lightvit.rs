//! Assistant transformer stream: parallel single-layer transformer branches over
//! patchifications of the stride-4 feature map, fused back into one map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CtoError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{delegate_module, ConvBn, LayerNorm, Linear, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PATCH_SIZES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightVitConfig {
    pub in_channels: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward network as a multiple of `d_model`.
    pub mlp_ratio: usize,
    pub out_channels: usize,
}

impl LightVitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.d_model == 0 || self.out_channels == 0 || self.mlp_ratio == 0 {
            return Err(CtoError::Config("transformer widths must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CtoError::Config(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Token sequence `[B, N, d_model]` laid out row-major on a `rows x cols` patch grid.
#[derive(Debug, Clone, Copy)]
pub struct PatchTokens {
    pub tokens: Var,
    pub patch: usize,
    pub grid: (usize, usize),
}

impl PatchTokens {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts `[B, C, h, w]` into non-overlapping `p x p` patches, each flattened
/// channel-major into one row of `[B, (h/p)(w/p), C*p*p]`.
pub fn flatten_patches<T: Scalar>(g: &mut Graph<T>, f: Var, p: usize) -> Result<Var> {
    let [b, c, h, w] = g.value(f).dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return shape_err(format!("patch size {p} does not divide {h}x{w}"));
    }
    let (rows, cols) = (h / p, w / p);
    let y = g.reshape(f, &[b, c, rows, p, cols, p])?;
    let y = g.permute(y, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(y, &[b, rows * cols, c * p * p])
}

/// Places `[B, N, d]` tokens on their grid as a `[B, d, rows, cols]` map.
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let &[b, n, d] = shape.as_slice() else {
        return shape_err(format!("tokens must be [B, N, d], got {shape:?}"));
    };
    if n != grid.0 * grid.1 {
        return shape_err(format!("{n} tokens do not fill a {grid:?} grid"));
    }
    let y = g.reshape(tokens, &[b, grid.0, grid.1, d])?;
    g.permute(y, &[0, 3, 1, 2])
}

/// `softmax(q k^T / sqrt(d_k)) v` per head; returns the merged output `[B, N, d]`
/// and the attention probabilities `[B, heads, N, N]`.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let shape = g.shape(q).to_vec();
    let &[b, n, d] = shape.as_slice() else {
        return shape_err(format!("queries must be [B, N, d], got {shape:?}"));
    };
    if heads == 0 || d % heads != 0 {
        return shape_err(format!("{heads} heads do not divide d_model {d}"));
    }
    let dk = d / heads;
    let split = |g: &mut Graph<T>, x: Var, perm: &[usize], last: [usize; 2]| -> Result<Var> {
        let y = g.reshape(x, &[b, n, heads, dk])?;
        let y = g.permute(y, perm)?;
        g.reshape(y, &[b * heads, last[0], last[1]])
    };
    let qh = split(g, q, &[0, 2, 1, 3], [n, dk])?;
    let kt = split(g, k, &[0, 2, 3, 1], [dk, n])?;
    let vh = split(g, v, &[0, 2, 1, 3], [n, dk])?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, T::one() / T::from_usize(dk).expect("fits").sqrt());
    let probs = g.softmax_last(scores);
    let out = g.matmul(probs, vh)?;
    let out = g.reshape(out, &[b, heads, n, dk])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, n, d])?;
    let probs = g.reshape(probs, &[b, heads, n, n])?;
    Ok((out, probs))
}

#[derive(Debug, Clone)]
pub struct Mhsa<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> Mhsa<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(CtoError::Config(format!("{heads} heads do not divide d_model {d_model}")));
        }
        Ok(Self {
            query: Linear::new(&format!("{name}.query"), d_model, d_model, rng),
            key: Linear::new(&format!("{name}.key"), d_model, d_model, rng),
            value: Linear::new(&format!("{name}.value"), d_model, d_model, rng),
            output: Linear::new(&format!("{name}.output"), d_model, d_model, rng),
            heads,
        })
    }

    /// Returns the projected attention output and the attention probabilities.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let (a, probs) = scaled_dot_attention(g, q, k, v, self.heads)?;
        Ok((self.output.forward(g, a)?, probs))
    }
}

delegate_module!(Mhsa { query, key, value, output });

/// Pre-norm encoder layer: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Mhsa<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        d_model: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&format!("{name}.norm1"), d_model),
            attn: Mhsa::new(&format!("{name}.attn"), d_model, heads, rng)?,
            norm2: LayerNorm::new(&format!("{name}.norm2"), d_model),
            fc1: Linear::new(&format!("{name}.fc1"), d_model, d_model * mlp_ratio, rng),
            fc2: Linear::new(&format!("{name}.fc2"), d_model * mlp_ratio, d_model, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let n = self.norm1.forward(g, x)?;
        let (a, probs) = self.attn.forward(g, n)?;
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, n)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        Ok((g.add(x, h)?, probs))
    }
}

delegate_module!(TransformerBlock { norm1, attn, norm2, fc1, fc2 });

/// Linear patch embedding plus learned, zero-initialized position embeddings.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T> {
    pub proj: Linear<T>,
    pub position: Param<T>,
    pub patch: usize,
    pub grid: (usize, usize),
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        patch: usize,
        map: (usize, usize),
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch == 0 || map.0 % patch != 0 || map.1 % patch != 0 {
            return shape_err(format!("patch size {patch} does not divide {}x{}", map.0, map.1));
        }
        let grid = (map.0 / patch, map.1 / patch);
        Ok(Self {
            proj: Linear::new(&format!("{name}.proj"), in_channels * patch * patch, d_model, rng),
            position: Param::new(
                format!("{name}.position"),
                Tensor::zeros(&[1, grid.0 * grid.1, d_model]),
            ),
            patch,
            grid,
        })
    }

    /// Patchify and embed a `[B, C, h, w]` map.
    pub fn forward(&self, g: &mut Graph<T>, f: Var) -> Result<PatchTokens> {
        let [_, _, h, w] = g.value(f).dims4()?;
        if (h, w) != (self.grid.0 * self.patch, self.grid.1 * self.patch) {
            return shape_err(format!(
                "patch embedding built for {}x{} maps, got {h}x{w}",
                self.grid.0 * self.patch,
                self.grid.1 * self.patch
            ));
        }
        let flat = flatten_patches(g, f, self.patch)?;
        let e = self.proj.forward(g, flat)?;
        let pos = g.param(&self.position);
        Ok(PatchTokens {
            tokens: g.add(e, pos)?,
            patch: self.patch,
            grid: self.grid,
        })
    }
}

impl<T: Scalar> Module<T> for PatchEmbed<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.proj.visit_params(f);
        f(&self.position);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.proj.visit_params_mut(f);
        f(&mut self.position);
    }
}

#[derive(Debug, Clone)]
pub struct Branch<T> {
    pub embed: PatchEmbed<T>,
    pub block: TransformerBlock<T>,
}

delegate_module!(Branch { embed, block });

/// Result of one stream pass, with per-branch diagnostics.
#[derive(Debug, Clone)]
pub struct LightVitOutput {
    pub feature: Var,
    pub branch_tokens: Vec<PatchTokens>,
    pub attention: Vec<Var>,
}

/// Largest divisor of both map sides not exceeding `p`.
pub fn fitted_patch(p: usize, map: (usize, usize)) -> usize {
    let (mut a, mut b) = map;
    while b != 0 {
        (a, b) = (b, a % b);
    }
    (1..=p.min(a)).rev().find(|d| a % d == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct LightVit<T> {
    config: LightVitConfig,
    map: (usize, usize),
    pub branches: Vec<Branch<T>>,
    pub fuse: ConvBn<T>,
}

impl<T: Scalar> LightVit<T> {
    /// Builds the four branches for maps of size `map`. Every patch size must divide it.
    pub fn new<R: Rng + ?Sized>(config: &LightVitConfig, map: (usize, usize), rng: &mut R) -> Result<Self> {
        Self::with_patches(config, map, PATCH_SIZES, rng)
    }

    /// Like [`LightVit::new`], but a patch size that does not divide the map is
    /// lowered to the largest common divisor of the map sides below it.
    pub fn fitted<R: Rng + ?Sized>(config: &LightVitConfig, map: (usize, usize), rng: &mut R) -> Result<Self> {
        Self::with_patches(config, map, PATCH_SIZES.map(|p| fitted_patch(p, map)), rng)
    }

    fn with_patches<R: Rng + ?Sized>(
        config: &LightVitConfig,
        map: (usize, usize),
        patches: [usize; 4],
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let branches = patches
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let name = format!("lightvit.branch{i}");
                Ok(Branch {
                    embed: PatchEmbed::new(&format!("{name}.embed"), config.in_channels, p, map, config.d_model, rng)?,
                    block: TransformerBlock::new(
                        &format!("{name}.block"),
                        config.d_model,
                        config.heads,
                        config.mlp_ratio,
                        rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvBn::relu("lightvit.fuse", 4 * config.d_model, config.out_channels, 1, rng);
        Ok(Self {
            config: config.clone(),
            map,
            branches,
            fuse,
        })
    }

    pub fn config(&self) -> &LightVitConfig {
        &self.config
    }

    pub fn patch_sizes(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.embed.patch).collect()
    }

    pub fn forward(&mut self, g: &mut Graph<T>, f1: Var) -> Result<LightVitOutput> {
        let [_, c, h, w] = g.value(f1).dims4()?;
        if c != self.config.in_channels || (h, w) != self.map {
            return shape_err(format!(
                "transformer stream built for {} channels at {:?}, got {c} at {h}x{w}",
                self.config.in_channels, self.map
            ));
        }
        let mut maps = Vec::with_capacity(4);
        let mut branch_tokens = Vec::with_capacity(4);
        let mut attention = Vec::with_capacity(4);
        for branch in &self.branches {
            let tokens = branch.embed.forward(g, f1)?;
            let (t, probs) = branch.block.forward(g, tokens.tokens)?;
            let m = tokens_to_map(g, t, tokens.grid)?;
            maps.push(g.resize_bilinear(m, h, w)?);
            branch_tokens.push(tokens);
            attention.push(probs);
        }
        let cat = g.concat(&maps, 1)?;
        let feature = self.fuse.forward(g, cat)?;
        Ok(LightVitOutput {
            feature,
            branch_tokens,
            attention,
        })
    }
}

delegate_module!(LightVit { branches, fuse });
