//! A small DeiT-style vision transformer: patch embedding, class and
//! distillation tokens, pre-norm self-attention blocks and a final norm.

use serde::{Deserialize, Serialize};

use crate::params::{Initializer, ParamStore, Scope};
use crate::tensor::{ConvSpec, Element, Tensor};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;
const TOKEN_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeiTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub input_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl Default for DeiTConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            input_channels: 3,
            image_h: 64,
            image_w: 64,
        }
    }
}

impl DeiTConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 {
            problems.push("patch_size must be positive".to_string());
        } else if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            problems.push(format!(
                "image {}x{} must be divisible by patch_size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.image_h == 0 || self.image_w == 0 {
            problems.push("image dims must be positive".to_string());
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            problems.push(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.input_channels == 0 {
            problems.push("input_channels must be positive".to_string());
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            problems.push(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("backbone: {}", problems.join("; "))))
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// Class and distillation tokens plus one per patch.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 2
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h, p) = (self.embed_dim, self.mlp_hidden(), self.patch_size);
        let patch = d * self.input_channels * p * p + d;
        let tokens = 2 * d + self.num_tokens() * d;
        let block = 2 * (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
        patch + tokens + self.depth * block + 2 * d
    }
}

/// Adds a backbone's tensors under `prefix` (e.g. `edge.deit`).
pub fn init_backbone(store: &mut ParamStore, prefix: &str, cfg: &DeiTConfig, init: &Initializer) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    init.conv(
        store,
        &format!("{prefix}.patch_embed"),
        d,
        cfg.input_channels,
        cfg.patch_size,
    )?;
    for token in ["cls_token", "dist_token"] {
        let name = format!("{prefix}.{token}");
        let v = init.trunc_normal(&name, d, TOKEN_STD);
        store.insert(name, v, &[1, 1, d], false)?;
    }
    let name = format!("{prefix}.pos_embed");
    let t = cfg.num_tokens();
    let v = init.trunc_normal(&name, t * d, TOKEN_STD);
    store.insert(name, v, &[1, t, d], false)?;
    for i in 0..cfg.depth {
        let b = format!("{prefix}.block{i}");
        init.layer_norm(store, &format!("{b}.norm1"), d)?;
        init.linear(store, &format!("{b}.attn.qkv"), d, 3 * d)?;
        init.linear(store, &format!("{b}.attn.proj"), d, d)?;
        init.layer_norm(store, &format!("{b}.norm2"), d)?;
        init.linear(store, &format!("{b}.mlp.fc1"), d, cfg.mlp_hidden())?;
        init.linear(store, &format!("{b}.mlp.fc2"), cfg.mlp_hidden(), d)?;
    }
    init.layer_norm(store, &format!("{prefix}.norm"), d)
}

fn layer_norm<E: Element>(x: &Tensor<E>, p: &Scope<'_, E>) -> Result<Tensor<E>> {
    x.layer_norm(p.get("gamma")?, p.get("beta")?, LN_EPS)
}

/// Non-overlapping `patch_size` convolution, flattened to `[N, P, D]`.
pub fn patch_embed<E: Element>(image: &Tensor<E>, cfg: &DeiTConfig, p: &Scope<'_, E>) -> Result<Tensor<E>> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("patch_embed expects NCHW, got {s:?}")));
    }
    if !s[2].is_multiple_of(cfg.patch_size) || !s[3].is_multiple_of(cfg.patch_size) {
        return Err(Error::shape(format!(
            "patch_embed: image {}x{} is not divisible by patch size {}",
            s[2], s[3], cfg.patch_size
        )));
    }
    let x = image.conv2d(
        p.get("patch_embed.weight")?,
        Some(p.get("patch_embed.bias")?),
        ConvSpec::valid(cfg.patch_size),
    )?;
    let (n, d) = (s[0], x.shape()[1]);
    let patches = x.shape()[2] * x.shape()[3];
    x.reshape(&[n, d, patches])?.permute(&[0, 2, 1])
}

#[derive(Debug)]
pub struct Attention<E: Element> {
    pub output: Tensor<E>,
    /// `[N·heads, T, T]`, each row a distribution over keys.
    pub weights: Tensor<E>,
}

/// Multi-head scaled dot-product self-attention over `x: [N, T, D]`.
pub fn multi_head_attention<E: Element>(x: &Tensor<E>, p: &Scope<'_, E>, heads: usize) -> Result<Attention<E>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("attention expects [N, T, D], got {s:?}")));
    }
    let (n, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("embed dim {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qkv = p
        .linear("qkv", x)?
        .reshape(&[n, t, 3, heads, dh])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape(&[3, n * heads, t, dh])?;
    let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[n * heads, t, dh]);
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scores = q
        .batch_matmul(&k.transpose_last()?)?
        .scale(E::lit(1.0 / (dh as f64).sqrt()));
    let weights = scores.softmax(2)?;
    let mixed = weights
        .batch_matmul(&v)?
        .reshape(&[n, heads, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, t, d])?;
    Ok(Attention {
        output: p.linear("proj", &mixed)?,
        weights,
    })
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
pub fn encoder_block<E: Element>(x: &Tensor<E>, p: &Scope<'_, E>, heads: usize) -> Result<Tensor<E>> {
    let attn = multi_head_attention(&layer_norm(x, &p.sub("norm1"))?, &p.sub("attn"), heads)?;
    let x = x.add(&attn.output)?;
    let mlp = p.sub("mlp");
    let h = mlp.linear("fc1", &layer_norm(&x, &p.sub("norm2"))?)?.gelu();
    x.add(&mlp.linear("fc2", &h)?)
}

/// Backbone forward pass; returns the normalized class token, `[N, D]`.
pub fn deit_forward<E: Element>(image: &Tensor<E>, cfg: &DeiTConfig, p: &Scope<'_, E>) -> Result<Tensor<E>> {
    let s = image.shape();
    if s.len() != 4 || s[1] != cfg.input_channels {
        return Err(Error::shape(format!(
            "backbone expects {} input channels, got shape {s:?}",
            cfg.input_channels
        )));
    }
    if s[2] != cfg.image_h || s[3] != cfg.image_w {
        return Err(Error::shape(format!(
            "backbone expects {}x{} images, got {}x{}",
            cfg.image_h, cfg.image_w, s[2], s[3]
        )));
    }
    let (n, d) = (s[0], cfg.embed_dim);
    let patches = patch_embed(image, cfg, p)?;
    let cls = p.get("cls_token")?.expand(&[n, 1, d])?;
    let dist = p.get("dist_token")?.expand(&[n, 1, d])?;
    let mut x = Tensor::concat(&[cls, dist, patches], 1)?.add(p.get("pos_embed")?)?;
    for i in 0..cfg.depth {
        x = encoder_block(&x, &p.sub(&format!("block{i}")), cfg.num_heads)?;
    }
    let x = layer_norm(&x, &p.sub("norm"))?;
    x.narrow(1, 0, 1)?.reshape(&[n, d])
}
