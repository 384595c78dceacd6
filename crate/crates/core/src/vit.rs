//! Vision transformer backbone.
//!
//! Pre-norm blocks with learned positional embeddings. Two fixed entry
//! sizes are supported: the configured `image_size` and half of it (used
//! for local crops during pre-training). Any other input size is rejected.

use std::fmt;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::{Builder, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Base,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Base => "base",
            Preset::Desk => "desk",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "base" => Ok(Preset::Base),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::config(format!("unknown preset '{other}' (expected tiny, base or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl ViTConfig {
    pub fn preset(p: Preset) -> Self {
        let (image_size, patch_size, embed_dim, num_heads, depth) = match p {
            Preset::Tiny => (448, 16, 192, 3, 12),
            Preset::Base => (448, 16, 768, 12, 12),
            Preset::Desk => (32, 8, 64, 4, 4),
        };
        Self { image_size, patch_size, in_channels: 12, embed_dim, depth, num_heads, mlp_ratio: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("vit.{k} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patch grid side `G`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length `1 + G²`.
    pub fn tokens(&self) -> usize {
        1 + self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Input size of the local-crop entry, if the half-size image still
    /// tiles into whole patches.
    pub fn local_size(&self) -> Option<usize> {
        let half = self.image_size / 2;
        (self.image_size % 2 == 0 && half >= self.patch_size && half % self.patch_size == 0).then_some(half)
    }

    /// Field-by-field differences, for checkpoint compatibility errors.
    pub fn diff(&self, other: &ViTConfig) -> Vec<String> {
        let pairs = [
            ("image_size", self.image_size, other.image_size),
            ("patch_size", self.patch_size, other.patch_size),
            ("in_channels", self.in_channels, other.in_channels),
            ("embed_dim", self.embed_dim, other.embed_dim),
            ("depth", self.depth, other.depth),
            ("num_heads", self.num_heads, other.num_heads),
            ("mlp_ratio", self.mlp_ratio, other.mlp_ratio),
        ];
        pairs.iter().filter(|(_, a, b)| a != b).map(|(k, a, b)| format!("vit.{k}: {a} != {b}")).collect()
    }
}

impl fmt::Display for ViTConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ViT(image {}, patch {}, channels {}, dim {}, depth {}, heads {})",
            self.image_size, self.patch_size, self.in_channels, self.embed_dim, self.depth, self.num_heads
        )
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        b.scope(name, |b| Block {
            norm1: LayerNorm::build(b, "norm1", dim),
            qkv: Linear::build(b, "attn.qkv", dim, 3 * dim, true),
            proj: Linear::build(b, "attn.proj", dim, dim, true),
            norm2: LayerNorm::build(b, "norm2", dim),
            fc1: Linear::build(b, "mlp.fc1", dim, mlp_ratio * dim, true),
            fc2: Linear::build(b, "mlp.fc2", mlp_ratio * dim, dim, true),
            heads,
        })
    }

    /// Returns the updated tokens and the attention probabilities
    /// `[N, heads, T, T]`.
    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, x: Var) -> Result<(Var, Var)> {
        let &[n, t, d] = &tape.shape(x)[..] else {
            return Err(Error::dim(format!("block expects [N, T, D] tokens, got {:?}", tape.shape(x))));
        };
        let h = self.heads;
        let dh = d / h;

        let y = self.norm1.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, y)?;
        let qkv = tape.reshape(qkv, &[n, t, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |i| -> Result<Var> {
            let p = tape.narrow(qkv, 0, i, 1)?;
            tape.reshape(p, &[n * h, t, dh])
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.scale(tape.matmul(q, kt)?, E::lit(1.0 / (dh as f64).sqrt()));
        let attn = tape.softmax(scores);
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.reshape(ctx, &[n, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n, t, d])?;
        let x = tape.add(x, self.proj.forward(tape, ctx)?)?;

        let y = self.norm2.forward(tape, x)?;
        let y = tape.gelu(self.fc1.forward(tape, y)?);
        let x = tape.add(x, self.fc2.forward(tape, y)?)?;
        Ok((x, tape.reshape(attn, &[n, h, t, t])?))
    }
}

#[derive(Clone, Debug)]
pub struct ViT {
    pub config: ViTConfig,
    pub patch_embed: Conv2d,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub pos_embed_local: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

/// Graph handles produced by one backbone forward pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final normalized tokens `[N, T, D]`.
    pub tokens: Var,
    /// `[N, D]`.
    pub class_token: Var,
    /// `[N, G², D]`, class token omitted.
    pub patch_tokens: Var,
    /// Attention probabilities `[N, heads, T, T]` of every block.
    pub attentions: Vec<Var>,
    pub grid: usize,
}

/// Concrete result of [`ViT::infer`].
#[derive(Clone, Debug)]
pub struct ViTOutput {
    /// `[N, D]`
    pub class_token: Tensor,
    /// `[N, G, G, D]`
    pub patch_tokens: Tensor,
    /// Min-max normalized class-token attention `[N, heads, G, G]`.
    pub attention_maps: Tensor,
}

impl ViT {
    pub const PREFIX: &'static str = "backbone";

    pub fn build<R: Rng>(b: &mut Builder<'_, R>, config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.patch_size;
        Ok(b.scope(Self::PREFIX, |b| {
            let patch_embed = Conv2d::build(b, "patch_embed", config.in_channels, d, p, p, 0, true);
            let cls_token = b.trunc_normal("cls_token", &[1, 1, d], 0.02);
            let pos_embed = b.trunc_normal("pos_embed", &[config.tokens(), d], 0.02);
            let pos_embed_local = config.local_size().map(|s| {
                let g = s / p;
                b.trunc_normal("pos_embed_local", &[1 + g * g, d], 0.02)
            });
            let blocks = (0..config.depth)
                .map(|i| Block::build(b, &format!("blocks.{i}"), d, config.num_heads, config.mlp_ratio))
                .collect();
            let norm = LayerNorm::build(b, "norm", d);
            ViT { config: config.clone(), patch_embed, cls_token, pos_embed, pos_embed_local, blocks, norm }
        }))
    }

    /// Patch projection, class token and positional embedding:
    /// `[N, C, S, S]` images to `[N, 1 + (S/p)², D]` tokens.
    pub fn embed<E: Element>(&self, tape: &Tape<'_, E>, images: Var) -> Result<(Var, usize)> {
        let cfg = &self.config;
        let shape = tape.shape(images);
        let &[n, c, h, w] = &shape[..] else {
            return Err(Error::config(format!("expected N×C×H×W images, got {shape:?}")));
        };
        if c != cfg.in_channels {
            return Err(Error::config(format!("image has {c} channels but the backbone expects {}", cfg.in_channels)));
        }
        let pos = if h == cfg.image_size && w == cfg.image_size {
            self.pos_embed
        } else if Some(h) == cfg.local_size() && w == h {
            self.pos_embed_local.expect("local entry exists when local_size is defined")
        } else {
            return Err(Error::config(format!(
                "image is {h}×{w} but the backbone accepts {s}×{s}{}",
                cfg.local_size().map(|l| format!(" or {l}×{l}")).unwrap_or_default(),
                s = cfg.image_size
            )));
        };
        let g = h / cfg.patch_size;
        let d = cfg.embed_dim;
        let x = self.patch_embed.forward(tape, images)?;
        let x = tape.reshape(x, &[n, d, g * g])?;
        let x = tape.permute(x, &[0, 2, 1])?;
        let cls = tape.expand0(tape.param(self.cls_token), n)?;
        let x = tape.concat(&[cls, x], 1)?;
        Ok((tape.add_broadcast(x, tape.param(pos))?, g))
    }

    pub fn forward<E: Element>(&self, tape: &Tape<'_, E>, images: Var) -> Result<Encoded> {
        let (mut x, grid) = self.embed(tape, images)?;
        let mut attentions = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward(tape, x)?;
            x = y;
            attentions.push(a);
        }
        let tokens = self.norm.forward(tape, x)?;
        let &[n, t, d] = &tape.shape(tokens)[..] else { unreachable!("tokens are rank 3") };
        let class_token = tape.reshape(tape.narrow(tokens, 1, 0, 1)?, &[n, d])?;
        let patch_tokens = tape.narrow(tokens, 1, 1, t - 1)?;
        Ok(Encoded { tokens, class_token, patch_tokens, attentions, grid })
    }

    /// Final-block class-token attention over patch keys, `[N, heads, G, G]`,
    /// before normalization.
    pub fn class_attention<E: Element>(&self, tape: &Tape<'_, E>, enc: &Encoded) -> Result<Var> {
        let last = *enc.attentions.last().ok_or_else(|| Error::config("backbone has no blocks"))?;
        let &[n, h, t, _] = &tape.shape(last)[..] else { unreachable!("attention is rank 4") };
        let row = tape.narrow(last, 2, 0, 1)?;
        let row = tape.narrow(row, 3, 1, t - 1)?;
        tape.reshape(row, &[n, h, enc.grid, enc.grid])
    }

    /// Per-head attention maps min-max normalized to `[0, 1]`.
    pub fn attention_maps<E: Element>(&self, tape: &Tape<'_, E>, enc: &Encoded) -> Result<Var> {
        let raw = self.class_attention(tape, enc)?;
        tape.minmax_normalize(raw)
    }

    /// Token grid as an image-like `[N, D, G, G]` tensor.
    pub fn token_grid<E: Element>(&self, tape: &Tape<'_, E>, enc: &Encoded) -> Result<Var> {
        let &[n, _, d] = &tape.shape(enc.patch_tokens)[..] else { unreachable!("tokens are rank 3") };
        let x = tape.permute(enc.patch_tokens, &[0, 2, 1])?;
        tape.reshape(x, &[n, d, enc.grid, enc.grid])
    }

    /// Forward pass without gradient recording.
    pub fn infer(&self, store: &ParamStore, images: &Tensor) -> Result<ViTOutput> {
        let tape = Tape::inference(store);
        let x = tape.constant(images.clone());
        let enc = self.forward(&tape, x)?;
        let maps = self.attention_maps(&tape, &enc)?;
        let n = images.shape()[0];
        let (g, d) = (enc.grid, self.config.embed_dim);
        Ok(ViTOutput {
            class_token: tape.value(enc.class_token).as_ref().clone(),
            patch_tokens: tape.value(enc.patch_tokens).as_ref().clone().reshape([n, g, g, d])?,
            attention_maps: tape.value(maps).as_ref().clone(),
        })
    }

    /// Number of scalar weights in the backbone.
    pub fn count_parameters<E: Element>(store: &ParamStore<E>) -> usize {
        store.count_weights(Self::PREFIX)
    }
}
