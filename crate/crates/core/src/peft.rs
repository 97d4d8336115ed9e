//! Parameter-efficient regimes: which values are tunable, and which are injected.
//!
//! * `Full` tunes the whole backbone.
//! * `Lora` freezes the backbone and injects low-rank pairs `A` [r×d_in],
//!   `B` [d_out×r] on selected attention projections.
//! * `Vpt` freezes the backbone and injects prompt tokens after the class token.
//! * `BitFit` tunes bias vectors only (LayerNorm gains stay frozen).
//! * `Apla` tunes a seeded random subset of columns of each block's attention
//!   output projection `attn.proj.weight`.

use indexmap::IndexMap;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::rng::{truncated_normal, SeededRng, Stream};
use crate::tensor::{ParamStore, Tensor};
use crate::vit::{is_bias, ViTConfig, INIT_STD};

pub const SHALLOW_PROMPT_NAME: &str = "vpt.prompts";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "q" => Ok(LoraTarget::Q),
            "k" => Ok(LoraTarget::K),
            "v" => Ok(LoraTarget::V),
            "o" => Ok(LoraTarget::O),
            other => Err(Error::Config(format!("unknown LoRA target `{other}` (expected q, k, v or o)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Shallow,
    Deep,
}

impl PromptMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "shallow" => Ok(PromptMode::Shallow),
            "deep" => Ok(PromptMode::Deep),
            other => Err(Error::Config(format!("unknown prompt mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterSpec {
    Full,
    Lora { rank: usize, alpha: f64, targets: Vec<LoraTarget> },
    Vpt { prompts: usize, mode: PromptMode },
    #[serde(rename = "bitfit")]
    BitFit,
    Apla { fraction: f64, seed: u64 },
}

impl AdapterSpec {
    pub fn lora_default() -> Self {
        AdapterSpec::Lora { rank: 4, alpha: 8.0, targets: vec![LoraTarget::Q, LoraTarget::V] }
    }

    pub fn vpt_default() -> Self {
        AdapterSpec::Vpt { prompts: 8, mode: PromptMode::Shallow }
    }

    pub fn apla_default(seed: u64) -> Self {
        AdapterSpec::Apla { fraction: 0.1, seed }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdapterSpec::Full => "full",
            AdapterSpec::Lora { .. } => "lora",
            AdapterSpec::Vpt { .. } => "vpt",
            AdapterSpec::BitFit => "bitfit",
            AdapterSpec::Apla { .. } => "apla",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AdapterSpec::Lora { rank, alpha, targets } => {
                if *rank < 1 {
                    return Err(Error::Config("LoRA rank must be at least 1".into()));
                }
                if targets.is_empty() {
                    return Err(Error::Config("LoRA needs at least one target".into()));
                }
                if !alpha.is_finite() {
                    return Err(Error::Config("LoRA alpha must be finite".into()));
                }
            }
            AdapterSpec::Vpt { prompts, .. } if *prompts < 1 => {
                return Err(Error::Config("VPT needs at least one prompt".into()));
            }
            AdapterSpec::Apla { fraction, .. } if !(*fraction > 0.0 && *fraction <= 1.0) => {
                return Err(Error::Config(format!("APLA fraction must lie in (0, 1], got {fraction}")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Trainability of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainability {
    Whole(bool),
    /// Sorted column indices of a matrix; all other columns are frozen.
    Columns(Vec<usize>),
}

impl Trainability {
    pub fn any(&self) -> bool {
        !matches!(self, Trainability::Whole(false))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainabilityMask {
    entries: IndexMap<String, Trainability>,
}

impl TrainabilityMask {
    pub fn get(&self, name: &str) -> Option<&Trainability> {
        self.entries.get(name)
    }

    pub fn set(&mut self, name: impl Into<String>, t: Trainability) {
        self.entries.insert(name.into(), t);
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(Trainability::any)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Trainability)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Every entry set to `value`, covering exactly the paths of `params`.
    pub fn uniform(params: &ParamStore, value: bool) -> Self {
        let mut m = TrainabilityMask::default();
        for name in params.names() {
            m.set(name, Trainability::Whole(value));
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraLayout {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl LoraLayout {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub count: usize,
    pub mode: PromptMode,
}

/// How injected parameters take part in the forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayout {
    pub lora: Option<LoraLayout>,
    pub prompts: Option<PromptLayout>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InjectedParams {
    pub layout: AdapterLayout,
    pub params: ParamStore,
}

pub fn lora_prefix(block: usize, target: LoraTarget) -> String {
    format!("lora.block.{block}.{}", target.as_str())
}

pub fn deep_prompt_name(block: usize) -> String {
    format!("vpt.block.{block}.prompts")
}

pub fn is_injected(name: &str) -> bool {
    name.starts_with("lora.") || name.starts_with("vpt.")
}

/// Heads attached by training stages, outside the backbone ∪ adapters tree.
pub fn is_head(name: &str) -> bool {
    name.starts_with("dino_head.") || name.starts_with("head.")
}

/// `⌈ρ·d⌉`, robust to representation error in `ρ·d`.
pub fn apla_column_count(fraction: f64, d: usize) -> usize {
    ((fraction * d as f64 - 1e-9).ceil() as usize).clamp(1, d)
}

/// Seeded column subset for one block's output projection.
pub fn apla_columns(seed: u64, block: usize, d: usize, fraction: f64) -> Vec<usize> {
    let mut rng = SeededRng::with_stream(seed, block as u64);
    let mut idx = sample(&mut rng, d, apla_column_count(fraction, d)).into_vec();
    idx.sort_unstable();
    idx
}

/// Trainability mask over backbone paths plus any parameters the regime injects.
pub fn build_mask(
    spec: &AdapterSpec,
    backbone: &ParamStore,
    config: &ViTConfig,
    init_seed: u64,
) -> Result<(TrainabilityMask, InjectedParams)> {
    spec.validate()?;
    let known: IndexMap<String, Vec<usize>> = config.backbone_shapes().into_iter().collect();
    let mut mask = TrainabilityMask::default();
    for (name, t) in backbone.iter() {
        if is_injected(name) || is_head(name) {
            continue;
        }
        let shape = known
            .get(name)
            .ok_or_else(|| contract_err(format!("unknown parameter path `{name}`")))?;
        if shape.as_slice() != t.shape() {
            return Err(shape_err(format!("`{name}` has shape {:?}, config expects {shape:?}", t.shape())));
        }
        let tr = match spec {
            AdapterSpec::Full => Trainability::Whole(true),
            AdapterSpec::Lora { .. } | AdapterSpec::Vpt { .. } => Trainability::Whole(false),
            AdapterSpec::BitFit => Trainability::Whole(is_bias(name)),
            AdapterSpec::Apla { fraction, seed } => match apla_block(name) {
                Some(block) => Trainability::Columns(apla_columns(*seed, block, config.embed_dim, *fraction)),
                None => Trainability::Whole(false),
            },
        };
        mask.set(name, tr);
    }
    for name in known.keys() {
        if !backbone.contains(name) {
            return Err(contract_err(format!("backbone is missing `{name}`")));
        }
    }

    let mut rng = SeededRng::new(init_seed, Stream::Inject);
    let mut injected = InjectedParams::default();
    let d = config.embed_dim;
    match spec {
        AdapterSpec::Lora { rank, alpha, targets } => {
            if *rank > d {
                return Err(Error::Config(format!("LoRA rank {rank} exceeds min(d_out, d_in) = {d}")));
            }
            for l in 0..config.depth {
                for &t in targets {
                    let p = lora_prefix(l, t);
                    let a = Tensor::matrix(*rank, d, truncated_normal(&mut rng, rank * d, INIT_STD))?;
                    injected.params.insert(format!("{p}.a"), a);
                    injected.params.insert(format!("{p}.b"), Tensor::zeros(&[d, *rank]));
                }
            }
            injected.layout.lora = Some(LoraLayout { rank: *rank, alpha: *alpha, targets: targets.clone() });
        }
        AdapterSpec::Vpt { prompts, mode } => {
            let names = match mode {
                PromptMode::Shallow => vec![SHALLOW_PROMPT_NAME.to_string()],
                PromptMode::Deep => (0..config.depth).map(deep_prompt_name).collect(),
            };
            for n in names {
                let t = Tensor::matrix(*prompts, d, truncated_normal(&mut rng, prompts * d, INIT_STD))?;
                injected.params.insert(n, t);
            }
            injected.layout.prompts = Some(PromptLayout { count: *prompts, mode: *mode });
        }
        _ => {}
    }
    injected.params.round_to_f32();
    for name in injected.params.names() {
        mask.set(name, Trainability::Whole(true));
    }
    Ok((mask, injected))
}

fn apla_block(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("block.")?;
    let (idx, tail) = rest.split_once('.')?;
    (tail == "attn.proj.weight").then(|| idx.parse().ok()).flatten()
}

/// `y = W·x + (α/r)·B·(A·x)` for each row `x` of `x` ([n×d_in] or [d_in]).
pub fn lora_forward(w: &Tensor, x: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, rank: usize) -> Result<Tensor> {
    if w.rank() != 2 || a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err("lora_forward expects matrix W, A and B"));
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    if rank == 0 || rank > d_out.min(d_in) {
        return Err(Error::Config(format!("LoRA rank {rank} exceeds min(d_out, d_in) = {}", d_out.min(d_in))));
    }
    if a.shape() != [rank, d_in] || b.shape() != [d_out, rank] {
        return Err(shape_err(format!(
            "LoRA factors A {:?}, B {:?} do not fit W {:?} at rank {rank}",
            a.shape(),
            b.shape(),
            w.shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf_ref(x, false);
    let wv = tape.leaf_ref(w, false);
    let av = tape.leaf_ref(a, false);
    let bv = tape.leaf_ref(b, false);
    let base = tape.matmul_nt(xv, wv)?;
    let xa = tape.matmul_nt(xv, av)?;
    let xab = tape.matmul_nt(xa, bv)?;
    let scaled = tape.scale(xab, alpha / rank as f64);
    let y = tape.add(base, scaled)?;
    let out = tape.to_tensor(y);
    if x.rank() == 1 {
        Ok(Tensor::vector(out.into_data()))
    } else {
        Ok(out)
    }
}

/// Inserts prompt tokens after the class token.
///
/// Shallow prompts enter at layer 0 only. Deep prompts enter at layer 0 and,
/// at every later layer, overwrite the previous layer's prompt positions.
pub fn prepend_prompts(tape: &mut Tape, tokens: Var, prompts: Var, layer: usize, mode: PromptMode) -> Result<Var> {
    let (t, d) = tape.dims(tokens);
    let (p, pd) = tape.dims(prompts);
    if d != pd {
        return Err(shape_err(format!("prompt width {pd} does not match token width {d}")));
    }
    if layer > 0 && mode == PromptMode::Shallow {
        return Ok(tokens);
    }
    let cls = tape.slice_rows(tokens, 0, 1)?;
    let skip = if layer == 0 { 1 } else { 1 + p };
    if layer > 0 && t <= skip {
        return Err(contract_err(format!(
            "deep prompts at layer {layer} need at least {} tokens, got {t}",
            skip + 1
        )));
    }
    let rest = tape.slice_rows(tokens, skip, t - skip)?;
    tape.concat_rows(&[cls, prompts, rest])
}

/// Zeroes gradient values of frozen parameters and frozen columns.
pub fn apply_grad_mask(grads: &mut ParamStore, mask: &TrainabilityMask) {
    for (name, g) in grads.iter_mut() {
        match mask.get(name) {
            None | Some(Trainability::Whole(false)) => g.data_mut().iter_mut().for_each(|v| *v = 0.0),
            Some(Trainability::Whole(true)) => {}
            Some(Trainability::Columns(cols)) => {
                let (_, c) = g.as_matrix_dims();
                let mut keep = vec![false; c];
                for &j in cols {
                    keep[j] = true;
                }
                for row in g.data_mut().chunks_mut(c) {
                    for (v, &k) in row.iter_mut().zip(&keep) {
                        if !k {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Number of tunable backbone and adapter values, and their share of the backbone.
pub fn trainable_count(mask: &TrainabilityMask, params: &ParamStore) -> Result<(usize, f64)> {
    let mut count = 0;
    let mut backbone = 0;
    for (name, t) in params.iter() {
        if is_head(name) {
            continue;
        }
        if !is_injected(name) {
            backbone += t.numel();
        }
        count += match mask.get(name) {
            Some(Trainability::Whole(true)) => t.numel(),
            Some(Trainability::Whole(false)) => 0,
            Some(Trainability::Columns(c)) => t.as_matrix_dims().0 * c.len(),
            None => return Err(contract_err(format!("mask has no entry for `{name}`"))),
        };
    }
    Ok((count, count as f64 / backbone.max(1) as f64))
}

/// Closed-form trainable count of a regime on a fresh backbone.
pub fn closed_form_trainable_count(spec: &AdapterSpec, config: &ViTConfig) -> usize {
    let d = config.embed_dim;
    match spec {
        AdapterSpec::Full => config.backbone_param_count(),
        AdapterSpec::Lora { rank, targets, .. } => config.depth * targets.len() * rank * (d + d),
        AdapterSpec::Vpt { prompts, mode } => match mode {
            PromptMode::Shallow => prompts * d,
            PromptMode::Deep => config.depth * prompts * d,
        },
        AdapterSpec::BitFit => config.backbone_bias_count(),
        AdapterSpec::Apla { fraction, .. } => config.depth * apla_column_count(*fraction, d) * d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::init_backbone;

    fn tiny() -> (ViTConfig, ParamStore) {
        let cfg = ViTConfig::tiny();
        (cfg, init_backbone(&cfg, 0).unwrap())
    }

    fn count(spec: &AdapterSpec) -> usize {
        let (cfg, bb) = tiny();
        let (mask, inj) = build_mask(spec, &bb, &cfg, 1).unwrap();
        let mut all = bb.clone();
        for (n, t) in inj.params.iter() {
            all.insert(n, t.clone());
        }
        trainable_count(&mask, &all).unwrap().0
    }

    #[test]
    fn full_trains_everything() {
        let (cfg, _) = tiny();
        assert_eq!(count(&AdapterSpec::Full), cfg.backbone_param_count());
    }

    #[test]
    fn bitfit_counts_bias_vectors_only() {
        let (cfg, bb) = tiny();
        let enumerated: usize = bb.iter().filter(|(n, _)| n.ends_with(".bias")).map(|(_, t)| t.numel()).sum();
        assert_eq!(count(&AdapterSpec::BitFit), enumerated);
        assert_eq!(enumerated, cfg.backbone_bias_count());
        let (mask, _) = build_mask(&AdapterSpec::BitFit, &bb, &cfg, 0).unwrap();
        assert!(!mask.is_trainable("block.0.norm1.weight"));
        assert!(mask.is_trainable("block.0.norm1.bias"));
    }

    #[test]
    fn apla_quarter_fraction_picks_eight_columns_deterministically() {
        let (cfg, bb) = tiny();
        let spec = AdapterSpec::Apla { fraction: 0.25, seed: 9 };
        let (m1, _) = build_mask(&spec, &bb, &cfg, 0).unwrap();
        let (m2, _) = build_mask(&spec, &bb, &cfg, 123).unwrap();
        for l in 0..2 {
            let name = format!("block.{l}.attn.proj.weight");
            let Some(Trainability::Columns(c)) = m1.get(&name) else { panic!("no columns") };
            assert_eq!(c.len(), 8);
            assert!(c.windows(2).all(|w| w[0] < w[1]) && c.iter().all(|&j| j < 32));
            assert_eq!(m1.get(&name), m2.get(&name));
        }
        assert_ne!(m1.get("block.0.attn.proj.weight"), m1.get("block.1.attn.proj.weight"));
        assert_eq!(count(&spec), 512);
        assert_eq!(apla_column_count(0.1, 32), 4);
    }

    #[test]
    fn lora_and_vpt_counts() {
        let lora = AdapterSpec::Lora { rank: 2, alpha: 4.0, targets: vec![LoraTarget::Q, LoraTarget::V] };
        assert_eq!(count(&lora), 512);
        let vpt = AdapterSpec::Vpt { prompts: 4, mode: PromptMode::Shallow };
        assert_eq!(count(&vpt), 128);
        let deep = AdapterSpec::Vpt { prompts: 4, mode: PromptMode::Deep };
        assert_eq!(count(&deep), 256);
    }

    #[test]
    fn lora_b_starts_at_zero() {
        let (cfg, bb) = tiny();
        let (_, inj) = build_mask(&AdapterSpec::lora_default(), &bb, &cfg, 0).unwrap();
        assert!(inj.params.get("lora.block.1.v.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(inj.params.get("lora.block.1.v.a").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unknown_path_is_contract_error() {
        let (cfg, mut bb) = tiny();
        bb.insert("block.0.mystery", Tensor::zeros(&[2]));
        assert!(matches!(build_mask(&AdapterSpec::Full, &bb, &cfg, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let (cfg, bb) = tiny();
        for spec in [
            AdapterSpec::Lora { rank: 0, alpha: 1.0, targets: vec![LoraTarget::Q] },
            AdapterSpec::Lora { rank: 2, alpha: 1.0, targets: vec![] },
            AdapterSpec::Vpt { prompts: 0, mode: PromptMode::Deep },
            AdapterSpec::Apla { fraction: 0.0, seed: 0 },
            AdapterSpec::Apla { fraction: 1.5, seed: 0 },
            AdapterSpec::Lora { rank: 33, alpha: 1.0, targets: vec![LoraTarget::Q] },
        ] {
            assert!(matches!(build_mask(&spec, &bb, &cfg, 0), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn lora_forward_identities() {
        let w = Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let a = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.1, 0.4, 0.0]).unwrap();
        let zero_b = Tensor::zeros(&[3, 2]);
        let plain = crate::autodiff::matmul(&Tensor::matrix(1, 3, x.data().to_vec()).unwrap(), &transpose(&w)).unwrap();
        assert_eq!(lora_forward(&w, &x, &a, &zero_b, 8.0, 2).unwrap().data(), plain.data());

        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let dw = Tensor::matrix(3, 3, vec![0.5, 0.0, -0.25, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let y = lora_forward(&w, &x, &eye, &dw, 3.0, 3).unwrap();
        let mut sum = w.clone();
        sum.data_mut().iter_mut().zip(dw.data()).for_each(|(a, b)| *a += b);
        let expected = crate::autodiff::matmul(&Tensor::matrix(1, 3, x.data().to_vec()).unwrap(), &transpose(&sum)).unwrap();
        for (p, q) in y.data().iter().zip(expected.data()) {
            assert!((p - q).abs() < 1e-15);
        }
        assert!(matches!(lora_forward(&w, &x, &a, &zero_b, 1.0, 4), Err(Error::Config(_))));
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = t.as_matrix_dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.at(i, j);
            }
        }
        Tensor::matrix(c, r, out).unwrap()
    }

    #[test]
    fn prompt_insertion_modes() {
        let mut tape = Tape::new();
        let tokens = tape.leaf(17, 4, (0..68).map(f64::from).collect(), false).unwrap();
        let prompts = tape.leaf(4, 4, vec![-1.0; 16], false).unwrap();
        let out = prepend_prompts(&mut tape, tokens, prompts, 0, PromptMode::Shallow).unwrap();
        assert_eq!(tape.dims(out), (21, 4));
        assert_eq!(&tape.value(out)[4..20], &[-1.0; 16]);
        let same = prepend_prompts(&mut tape, out, prompts, 1, PromptMode::Shallow).unwrap();
        assert_eq!(same, out);

        let layer1 = tape.leaf(4, 4, vec![7.0; 16], false).unwrap();
        let deep = prepend_prompts(&mut tape, out, layer1, 1, PromptMode::Deep).unwrap();
        assert_eq!(tape.dims(deep), (21, 4));
        assert_eq!(&tape.value(deep)[4..20], &[7.0; 16]);
        assert_eq!(&tape.value(deep)[20..], &tape.value(out)[20..]);

        let short = tape.leaf(3, 4, vec![0.0; 12], false).unwrap();
        assert!(matches!(prepend_prompts(&mut tape, short, layer1, 1, PromptMode::Deep), Err(Error::Contract(_))));
        let narrow = tape.leaf(4, 3, vec![0.0; 12], false).unwrap();
        assert!(matches!(prepend_prompts(&mut tape, tokens, narrow, 0, PromptMode::Deep), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_mask_zeroes_frozen_values() {
        let mut g = ParamStore::new();
        g.insert("w.weight", Tensor::matrix(2, 4, vec![1.0; 8]).unwrap());
        g.insert("b.bias", Tensor::vector(vec![1.0; 3]));
        let mut m = TrainabilityMask::default();
        m.set("w.weight", Trainability::Columns(vec![0, 2]));
        m.set("b.bias", Trainability::Whole(false));
        apply_grad_mask(&mut g, &m);
        assert_eq!(g.get("w.weight").unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.get("b.bias").unwrap().data(), &[0.0; 3]);
        let mut g2 = g.clone();
        apply_grad_mask(&mut g2, &TrainabilityMask::uniform(&g, false));
        assert!(g2.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }
}
