//! A backbone together with its injected adapters and optional heads.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::image::Image;
use crate::peft::{is_head, is_injected, AdapterLayout, InjectedParams, TrainabilityMask};
use crate::rng::truncated_normal;
use crate::tensor::{ParamStore, Tensor};
use crate::vit::{self, init_backbone, LinearVars, ViTConfig, INIT_STD};

pub const DINO_HEAD_PREFIX: &str = "dino_head.";
pub const HEAD_PREFIX: &str = "head.";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Backbone, injected adapter tensors and heads, all in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ViTConfig,
    pub layout: AdapterLayout,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        Ok(Model { config, layout: AdapterLayout::default(), params: init_backbone(&config, seed)? })
    }

    /// Checks that every backbone path is present with the configured shape.
    pub fn from_parts(config: ViTConfig, layout: AdapterLayout, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.backbone_shapes() {
            let t = params.get(&name).ok_or_else(|| contract_err(format!("model is missing `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err(format!("`{name}` has shape {:?}, config expects {shape:?}", t.shape())));
            }
        }
        Ok(Model { config, layout, params })
    }

    /// Adds injected adapter tensors. Tensors already present under the same
    /// name and shape are kept, so a second stage continues tuning them.
    pub fn attach(&mut self, injected: InjectedParams) -> Result<()> {
        if let Some(new) = injected.layout.lora {
            match &self.layout.lora {
                Some(old) if *old != new => {
                    return Err(Error::Config(format!(
                        "LoRA layout {new:?} conflicts with the model's existing {old:?}"
                    )))
                }
                _ => self.layout.lora = Some(new),
            }
        }
        if let Some(new) = injected.layout.prompts {
            match &self.layout.prompts {
                Some(old) if *old != new => {
                    return Err(Error::Config(format!(
                        "prompt layout {new:?} conflicts with the model's existing {old:?}"
                    )))
                }
                _ => self.layout.prompts = Some(new),
            }
        }
        for (name, t) in injected.params.iter() {
            match self.params.get(name) {
                Some(old) if old.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "injected `{name}` {:?} conflicts with existing {:?}",
                        t.shape(),
                        old.shape()
                    )))
                }
                Some(_) => {}
                None => {
                    self.params.insert(name, t.clone());
                }
            }
        }
        Ok(())
    }

    /// Backbone and injected adapters, without any head.
    pub fn feature_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.params.iter().filter(|(n, _)| !is_head(n)) {
            out.insert(name, t.clone());
        }
        out
    }

    pub fn injected_names(&self) -> Vec<String> {
        self.params.names().filter(|n| is_injected(n)).map(str::to_string).collect()
    }

    pub fn remove_dino_head(&mut self) {
        self.params.remove_prefix(DINO_HEAD_PREFIX);
    }

    /// Class-token embedding after the final norm.
    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(vit::forward_features(&self.params, &self.config, &self.layout, image)?.0)
    }

    pub fn has_head(&self) -> bool {
        self.params.contains(HEAD_WEIGHT) && self.params.contains(HEAD_BIAS)
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.params.get(HEAD_WEIGHT).map(|w| w.shape()[0])
    }

    /// Fresh linear prediction head `d → num_classes`.
    pub fn attach_head(&mut self, num_classes: usize, rng: &mut impl rand::Rng) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Data(format!("a prediction head needs at least 2 classes, got {num_classes}")));
        }
        let d = self.config.embed_dim;
        let mut w = Tensor::matrix(num_classes, d, truncated_normal(rng, num_classes * d, INIT_STD))?;
        w.round_to_f32();
        self.params.insert(HEAD_WEIGHT, w);
        self.params.insert(HEAD_BIAS, Tensor::zeros(&[num_classes]));
        Ok(())
    }

    pub fn head_logits(&self, image: &Image) -> Result<Vec<f64>> {
        let w = self.params.get(HEAD_WEIGHT).ok_or_else(|| contract_err("model has no prediction head"))?;
        let b = self.params.require(HEAD_BIAS)?;
        let e = self.embed(image)?;
        let d = self.config.embed_dim;
        Ok(w.data().chunks_exact(d).zip(b.data()).map(|(row, bias)| dot(row, &e) + bias).collect())
    }

    /// Head prediction; ties go to the smallest class id.
    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.head_logits(image)?))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Prediction head bound to a tape.
pub struct HeadVars {
    pub linear: LinearVars,
}

impl HeadVars {
    pub fn bind<'p>(
        tape: &mut Tape<'p>,
        params: &'p ParamStore,
        trainable: &dyn Fn(&str) -> bool,
        recorded: &mut Vec<(String, Var)>,
    ) -> Result<Self> {
        let mut leaf = |tape: &mut Tape<'p>, name: &str| -> Result<Var> {
            let grad = trainable(name);
            let v = tape.leaf_ref(params.get(name).ok_or_else(|| contract_err("model has no prediction head"))?, grad);
            if grad {
                recorded.push((name.to_string(), v));
            }
            Ok(v)
        };
        let weight = leaf(tape, HEAD_WEIGHT)?;
        let bias = leaf(tape, HEAD_BIAS)?;
        Ok(HeadVars { linear: LinearVars { weight, bias, lora: None } })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        vit::linear(tape, x, &self.linear, 0.0)
    }
}

/// Zeroed gradient buffers for every trainable entry of `mask` present in `params`.
pub(crate) fn zero_grads(params: &ParamStore, mask: &TrainabilityMask) -> ParamStore {
    let mut g = ParamStore::new();
    for (name, t) in params.iter().filter(|(n, _)| mask.is_trainable(n)) {
        g.insert(name, Tensor::zeros(t.shape()));
    }
    g
}

/// Adds one tape's leaf gradients into `into`, by parameter name.
pub(crate) fn accumulate_grads(into: &mut ParamStore, grads: &Gradients, recorded: &[(String, Var)]) -> Result<()> {
    for (name, var) in recorded {
        let Some(g) = grads.get(*var) else { continue };
        let dst = into
            .get_mut(name)
            .ok_or_else(|| contract_err(format!("no gradient buffer for `{name}`")))?;
        dst.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok(())
}

pub(crate) fn scale_grads(grads: &mut ParamStore, s: f64) {
    for (_, t) in grads.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}
