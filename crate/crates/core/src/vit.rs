//! Pre-norm Vision Transformer backbone.
//!
//! Parameters live in a [`ParamStore`] under stable dotted paths
//! (`block.3.attn.proj.weight`, ...). Injected adapter parameters share the
//! store under the `lora.` and `vpt.` prefixes; [`AdapterLayout`] tells the
//! forward pass how to use them.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::peft::{self, AdapterLayout, LoraTarget, PromptMode};
use crate::rng::truncated_normal;
use crate::tensor::{ParamStore, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub num_registers: usize,
}

impl ViTConfig {
    pub fn tiny() -> Self {
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_registers: 0,
        }
    }

    pub fn small() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_registers: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected tiny or small)"))),
        }
    }

    pub fn preset_name(&self) -> Option<&'static str> {
        if *self == Self::tiny() {
            Some("tiny")
        } else if *self == Self::small() {
            Some("small")
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.depth,
            self.num_heads,
            self.mlp_ratio,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("all ViT sizes must be positive: {self:?}")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    /// Closed-form size of the backbone parameter tree.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let patch = d * self.patch_dim() + d;
        let tokens = d + (1 + self.num_patches()) * d;
        let block = 4 * d + 4 * (d * d + d) + (h * d + h) + (d * h + d);
        patch + tokens + self.depth * block + 2 * d
    }

    /// Closed-form number of bias values in the backbone.
    pub fn backbone_bias_count(&self) -> usize {
        let d = self.embed_dim;
        let block = 2 * d + 4 * d + self.mlp_hidden() + d;
        d + self.depth * block + d
    }

    /// Name → shape map of the backbone, in canonical order.
    pub fn backbone_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let mut v = vec![
            ("patch_embed.weight".to_string(), vec![d, self.patch_dim()]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![1 + self.num_patches(), d]),
        ];
        for l in 0..self.depth {
            let p = format!("block.{l}");
            v.push((format!("{p}.norm1.weight"), vec![d]));
            v.push((format!("{p}.norm1.bias"), vec![d]));
            for m in ["q", "k", "v", "proj"] {
                v.push((format!("{p}.attn.{m}.weight"), vec![d, d]));
                v.push((format!("{p}.attn.{m}.bias"), vec![d]));
            }
            v.push((format!("{p}.norm2.weight"), vec![d]));
            v.push((format!("{p}.norm2.bias"), vec![d]));
            v.push((format!("{p}.mlp.fc1.weight"), vec![h, d]));
            v.push((format!("{p}.mlp.fc1.bias"), vec![h]));
            v.push((format!("{p}.mlp.fc2.weight"), vec![d, h]));
            v.push((format!("{p}.mlp.fc2.bias"), vec![d]));
        }
        v.push(("norm.weight".to_string(), vec![d]));
        v.push(("norm.bias".to_string(), vec![d]));
        v
    }
}

/// Whether a backbone path is a LayerNorm gain.
pub fn is_norm_gain(name: &str) -> bool {
    name.ends_with(".weight") && (name.contains("norm1") || name.contains("norm2") || name == "norm.weight")
}

pub fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Truncated-normal weights, zero biases, unit LayerNorm gains; values are
/// rounded to `f32` so a checkpoint holds them exactly.
pub fn init_backbone(config: &ViTConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in config.backbone_shapes() {
        let t = if is_norm_gain(&name) {
            Tensor::full(&shape, 1.0)
        } else if is_bias(&name) {
            Tensor::zeros(&shape)
        } else {
            let n = shape.iter().product();
            Tensor::new(shape, truncated_normal(&mut rng, n, INIT_STD))?
        };
        store.insert(name, t);
    }
    store.round_to_f32();
    Ok(store)
}

/// Flattens non-overlapping patches into rows of `channels · p · p` values
/// (channel-major within a patch), patches in raster order.
pub fn patchify(image: &Image, config: &ViTConfig) -> Result<Vec<f64>> {
    if image.channels != config.channels || image.height != config.image_size || image.width != config.image_size {
        return Err(shape_err(format!(
            "image {}×{}×{} does not match config {}×{}×{}",
            image.channels, image.height, image.width, config.channels, config.image_size, config.image_size
        )));
    }
    let p = config.patch_size;
    let g = config.grid();
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..config.channels {
                for y in 0..p {
                    let row = (c * image.height + gy * p + y) * image.width + gx * p;
                    out.extend(image.data[row..row + p].iter().map(|v| 2.0 * v - 1.0));
                }
            }
        }
    }
    Ok(out)
}

pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
    pub lora: Option<(Var, Var)>,
}

pub struct BlockVars {
    pub norm1: (Var, Var),
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub proj: LinearVars,
    pub norm2: (Var, Var),
    pub fc1: LinearVars,
    pub fc2: LinearVars,
    pub prompts: Option<Var>,
}

/// Backbone (plus injected adapter) parameters bound to tape leaves.
pub struct BackboneVars {
    pub config: ViTConfig,
    pub layout: AdapterLayout,
    pub patch: LinearVars,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub norm: (Var, Var),
    pub shallow_prompts: Option<Var>,
    /// Leaves bound with gradient recording, by parameter name.
    pub trainable: Vec<(String, Var)>,
}

impl BackboneVars {
    /// Binds parameters as borrowed leaves; `trainable(name)` decides which
    /// leaves record gradients.
    pub fn bind<'p>(
        tape: &mut Tape<'p>,
        params: &'p ParamStore,
        config: &ViTConfig,
        layout: &AdapterLayout,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<Self> {
        let recorded = RefCell::new(Vec::new());
        let leaf = |tape: &mut Tape<'p>, name: &str| -> Result<Var> {
            let grad = trainable(name);
            let v = tape.leaf_ref(params.require(name)?, grad);
            if grad {
                recorded.borrow_mut().push((name.to_string(), v));
            }
            Ok(v)
        };
        let linear = |tape: &mut Tape<'p>, base: &str, lora: Option<String>| -> Result<LinearVars> {
            let weight = leaf(tape, &format!("{base}.weight"))?;
            let bias = leaf(tape, &format!("{base}.bias"))?;
            let lora = match lora {
                Some(prefix) => Some((leaf(tape, &format!("{prefix}.a"))?, leaf(tape, &format!("{prefix}.b"))?)),
                None => None,
            };
            Ok(LinearVars { weight, bias, lora })
        };
        let patch = linear(tape, "patch_embed", None)?;
        let cls = leaf(tape, "cls_token")?;
        let pos = leaf(tape, "pos_embed")?;
        let lora_for = |l: usize, t: LoraTarget| -> Option<String> {
            layout
                .lora
                .as_ref()
                .filter(|lo| lo.targets.contains(&t))
                .map(|_| peft::lora_prefix(l, t))
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("block.{l}");
            let norm1 = (leaf(tape, &format!("{p}.norm1.weight"))?, leaf(tape, &format!("{p}.norm1.bias"))?);
            let q = linear(tape, &format!("{p}.attn.q"), lora_for(l, LoraTarget::Q))?;
            let k = linear(tape, &format!("{p}.attn.k"), lora_for(l, LoraTarget::K))?;
            let v = linear(tape, &format!("{p}.attn.v"), lora_for(l, LoraTarget::V))?;
            let proj = linear(tape, &format!("{p}.attn.proj"), lora_for(l, LoraTarget::O))?;
            let norm2 = (leaf(tape, &format!("{p}.norm2.weight"))?, leaf(tape, &format!("{p}.norm2.bias"))?);
            let fc1 = linear(tape, &format!("{p}.mlp.fc1"), None)?;
            let fc2 = linear(tape, &format!("{p}.mlp.fc2"), None)?;
            let prompts = match &layout.prompts {
                Some(pl) if pl.mode == PromptMode::Deep => Some(leaf(tape, &peft::deep_prompt_name(l))?),
                _ => None,
            };
            blocks.push(BlockVars { norm1, q, k, v, proj, norm2, fc1, fc2, prompts });
        }
        let norm = (leaf(tape, "norm.weight")?, leaf(tape, "norm.bias")?);
        let shallow_prompts = match &layout.prompts {
            Some(pl) if pl.mode == PromptMode::Shallow => Some(leaf(tape, peft::SHALLOW_PROMPT_NAME)?),
            _ => None,
        };
        Ok(BackboneVars {
            config: *config,
            layout: layout.clone(),
            patch,
            cls,
            pos,
            blocks,
            norm,
            shallow_prompts,
            trainable: recorded.into_inner(),
        })
    }
}

/// `x · Wᵀ + b`, plus the low-rank branch `(α/r) · (x · Aᵀ) · Bᵀ` when bound.
pub fn linear(tape: &mut Tape, x: Var, lin: &LinearVars, lora_scale: f64) -> Result<Var> {
    let y = tape.matmul_nt(x, lin.weight)?;
    let y = tape.add_row(y, lin.bias)?;
    match lin.lora {
        Some((a, b)) => {
            let xa = tape.matmul_nt(x, a)?;
            let xab = tape.matmul_nt(xa, b)?;
            let scaled = tape.scale(xab, lora_scale);
            tape.add(y, scaled)
        }
        None => Ok(y),
    }
}

/// Patch tokens with the class token prepended and positional embeddings added.
pub fn patch_embed(tape: &mut Tape, vars: &BackboneVars, image: &Image) -> Result<Var> {
    let cfg = &vars.config;
    let patches = tape.constant(cfg.num_patches(), cfg.patch_dim(), patchify(image, cfg)?)?;
    let tokens = linear(tape, patches, &vars.patch, 0.0)?;
    let seq = tape.concat_rows(&[vars.cls, tokens])?;
    tape.add(seq, vars.pos)
}

/// One pre-norm transformer block.
pub fn attention_block(tape: &mut Tape, x: Var, block: &BlockVars, config: &ViTConfig, lora_scale: f64) -> Result<Var> {
    let h = tape.layer_norm(x, block.norm1.0, block.norm1.1, LN_EPS)?;
    let q = linear(tape, h, &block.q, lora_scale)?;
    let k = linear(tape, h, &block.k, lora_scale)?;
    let v = linear(tape, h, &block.v, lora_scale)?;
    let dh = config.head_dim();
    let temperature = (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    for head in 0..config.num_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let attn = tape.softmax(scores, temperature)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let out = linear(tape, merged, &block.proj, lora_scale)?;
    let x = tape.add(x, out)?;
    let h = tape.layer_norm(x, block.norm2.0, block.norm2.1, LN_EPS)?;
    let h = linear(tape, h, &block.fc1, 0.0)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, &block.fc2, 0.0)?;
    tape.add(x, h)
}

/// Full forward pass; returns the final-normed token matrix (class token at row 0).
pub fn forward_tokens(tape: &mut Tape, vars: &BackboneVars, image: &Image) -> Result<Var> {
    let mut x = patch_embed(tape, vars, image)?;
    let lora_scale = vars.layout.lora.as_ref().map_or(0.0, |l| l.scale());
    let mode = vars.layout.prompts.as_ref().map(|p| p.mode);
    for (l, block) in vars.blocks.iter().enumerate() {
        let prompts = match mode {
            Some(PromptMode::Shallow) => vars.shallow_prompts,
            Some(PromptMode::Deep) => block.prompts,
            None => None,
        };
        if let (Some(p), Some(m)) = (prompts, mode) {
            x = peft::prepend_prompts(tape, x, p, l, m)?;
        }
        x = attention_block(tape, x, block, &vars.config, lora_scale)?;
    }
    tape.layer_norm(x, vars.norm.0, vars.norm.1, LN_EPS)
}

/// Class-token embedding after the final norm.
pub fn forward_cls(tape: &mut Tape, vars: &BackboneVars, image: &Image) -> Result<Var> {
    let tokens = forward_tokens(tape, vars, image)?;
    tape.slice_rows(tokens, 0, 1)
}

/// Class-token embedding `[d]` and full token matrix `[T×d]`, without gradients.
pub fn forward_features(
    params: &ParamStore,
    config: &ViTConfig,
    layout: &AdapterLayout,
    image: &Image,
) -> Result<(Vec<f64>, Tensor)> {
    let mut tape = Tape::new();
    let vars = BackboneVars::bind(&mut tape, params, config, layout, &|_| false)?;
    let tokens = forward_tokens(&mut tape, &vars, image)?;
    let t = tape.to_tensor(tokens);
    Ok((t.data()[..config.embed_dim].to_vec(), t))
}
