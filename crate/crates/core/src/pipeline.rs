//! The three training stages: self-supervised adaptation (`essa`), supervised
//! adaptation with a prediction head (`sa`), and test-time training (`ttt`).

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{contract_err, Error, Result};
use crate::image::Image;
use crate::model::{accumulate_grads, scale_grads, zero_grads, HeadVars, Model, DINO_HEAD_PREFIX, HEAD_PREFIX};
use crate::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use crate::peft::{apply_grad_mask, build_mask, is_injected, trainable_count, AdapterSpec, Trainability, TrainabilityMask};
use crate::rng::{SeededRng, Stream};
use crate::ssl::{init_dino_head, make_views, ssl_step, AugConfig, DinoHeadConfig, SslConfig, TeacherState};
use crate::vit::{self, BackboneVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Essa,
    Sa,
    Ttt,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Essa => "essa",
            Stage::Sa => "sa",
            Stage::Ttt => "ttt",
        }
    }
}

/// Whether supervised adaptation tunes everything or only an adapter's set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaMode {
    Full,
    Peft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub adapter: AdapterSpec,
    pub sa_mode: SaMode,
    pub optimizer: AdamWConfig,
    pub ssl: SslConfig,
    pub aug: AugConfig,
}

impl StageConfig {
    /// 100 epochs at 5e-4, batch 64, 10 warm-up epochs.
    pub fn essa(adapter: AdapterSpec) -> Self {
        StageConfig {
            stage: Stage::Essa,
            epochs: 100,
            batch_size: 64,
            base_lr: 5e-4,
            warmup_epochs: 10,
            seed: 0,
            adapter,
            sa_mode: SaMode::Full,
            optimizer: AdamWConfig::default(),
            ssl: SslConfig::default(),
            aug: AugConfig::default(),
        }
    }

    /// 30 epochs at 1e-3, batch 64, 3 warm-up epochs.
    pub fn sa(adapter: AdapterSpec, sa_mode: SaMode) -> Self {
        StageConfig { stage: Stage::Sa, epochs: 30, base_lr: 1e-3, warmup_epochs: 3, sa_mode, ..Self::essa(adapter) }
    }

    /// 10 epochs at 1e-4, batch 64, 1 warm-up epoch.
    pub fn ttt(adapter: AdapterSpec) -> Self {
        StageConfig { stage: Stage::Ttt, epochs: 10, base_lr: 1e-4, warmup_epochs: 1, ..Self::essa(adapter) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be less than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        self.adapter.validate()?;
        self.ssl.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base_lr: self.base_lr, warmup_epochs: self.warmup_epochs, total_epochs: self.epochs }
    }
}

/// One line of the per-epoch metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub kind: String,
    pub stage: Stage,
    pub adapter: String,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub steps_per_sec: f64,
    pub trainable_count: usize,
    pub trainable_fraction: f64,
    pub optimizer_state_bytes: usize,
}

/// Everything a stage mutates, enough to resume it exactly.
#[derive(Clone, Debug)]
pub struct RunState {
    pub config: StageConfig,
    pub model: Model,
    pub teacher: Option<TeacherState>,
    pub optimizer: OptimizerState,
    pub mask: TrainabilityMask,
    pub epoch: usize,
    pub data_rng: SeededRng,
    pub aug_rng: SeededRng,
}

impl RunState {
    /// Self-supervised adaptation of `model` under `config.adapter`.
    pub fn new_essa(mut model: Model, config: StageConfig) -> Result<Self> {
        config.validate()?;
        model.params.remove_prefix(HEAD_PREFIX);
        let mask = adapter_mask(&mut model, &config.adapter, config.seed)?;
        Self::with_ssl(model, config, mask)
    }

    /// Supervised adaptation with a fresh prediction head over `num_classes`.
    pub fn new_sa(mut model: Model, config: StageConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        model.remove_dino_head();
        let mut mask = match config.sa_mode {
            SaMode::Full => TrainabilityMask::uniform(&model.params, true),
            SaMode::Peft => adapter_mask(&mut model, &config.adapter, config.seed)?,
        };
        model.attach_head(num_classes, &mut SeededRng::new(config.seed, Stream::HeadInit))?;
        for name in [crate::model::HEAD_WEIGHT, crate::model::HEAD_BIAS] {
            mask.set(name, Trainability::Whole(true));
        }
        Self::assemble(model, config, mask, None)
    }

    /// Test-time training; the prediction head stays bit-identical.
    pub fn new_ttt(mut model: Model, config: StageConfig) -> Result<Self> {
        config.validate()?;
        if !model.has_head() {
            return Err(contract_err("test-time training needs a model with a trained prediction head"));
        }
        model.remove_dino_head();
        let mut mask = adapter_mask(&mut model, &config.adapter, config.seed)?;
        for name in [crate::model::HEAD_WEIGHT, crate::model::HEAD_BIAS] {
            mask.set(name, Trainability::Whole(false));
        }
        Self::with_ssl(model, config, mask)
    }

    fn with_ssl(mut model: Model, config: StageConfig, mut mask: TrainabilityMask) -> Result<Self> {
        let head = DinoHeadConfig::for_backbone(&model.config);
        init_dino_head(&mut model.params, model.config.embed_dim, &head, &mut SeededRng::new(config.seed, Stream::HeadInit))?;
        for name in model.params.names().filter(|n| n.starts_with(DINO_HEAD_PREFIX)) {
            mask.set(name, Trainability::Whole(true));
        }
        model.params.round_to_f32();
        let teacher = TeacherState::from_student(&model, config.ssl)?;
        Self::assemble(model, config, mask, Some(teacher))
    }

    fn assemble(mut model: Model, config: StageConfig, mask: TrainabilityMask, teacher: Option<TeacherState>) -> Result<Self> {
        model.params.round_to_f32();
        let optimizer = OptimizerState::new(config.optimizer, config.schedule(), &model.params, &mask)?;
        Ok(RunState {
            data_rng: SeededRng::new(config.seed, Stream::DataOrder),
            aug_rng: SeededRng::new(config.seed, Stream::Augment),
            config,
            model,
            teacher,
            optimizer,
            mask,
            epoch: 0,
        })
    }

    pub fn stage(&self) -> Stage {
        self.config.stage
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Trainable backbone and adapter values (heads excluded) and their share of the backbone.
    pub fn trainable(&self) -> Result<(usize, f64)> {
        trainable_count(&self.mask, &self.model.params)
    }

    /// One pass over `images` in a seeded order. Labels are required for `sa`.
    pub fn run_epoch(&mut self, images: &[Image], labels: Option<&[usize]>) -> Result<EpochRecord> {
        if images.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        if self.is_finished() {
            return Err(contract_err(format!("stage already ran its {} epochs", self.config.epochs)));
        }
        let labels = match (self.config.stage, labels) {
            (Stage::Sa, None) => return Err(Error::Data("labels required".into())),
            (Stage::Sa, Some(l)) if l.len() != images.len() => {
                return Err(Error::Data(format!("{} labels for {} images", l.len(), images.len())))
            }
            (_, l) => l,
        };
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.data_rng);
        let start = Instant::now();
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            loss_sum += match (self.config.stage, labels) {
                (Stage::Sa, Some(labels)) => {
                    let batch: Vec<(&Image, usize)> = chunk.iter().map(|&i| (&images[i], labels[i])).collect();
                    sa_step(&mut self.model, &self.mask, &mut self.optimizer, &batch, self.epoch)?
                }
                _ => {
                    let views: Vec<_> =
                        chunk.iter().map(|&i| make_views(&images[i], &mut self.aug_rng, &self.config.aug)).collect();
                    let teacher = self.teacher.as_mut().ok_or_else(|| contract_err("self-supervised stage without a teacher"))?;
                    ssl_step(&mut self.model, teacher, &self.mask, &mut self.optimizer, &views, self.epoch)?
                }
            };
            steps += 1;
        }
        let secs = start.elapsed().as_secs_f64();
        let (count, fraction) = self.trainable()?;
        let record = EpochRecord {
            kind: "epoch".into(),
            stage: self.config.stage,
            adapter: adapter_label(&self.config),
            epoch: self.epoch,
            loss: loss_sum / steps as f64,
            lr: self.config.schedule().lr_at(self.epoch),
            steps_per_sec: steps as f64 / secs.max(1e-12),
            trainable_count: count,
            trainable_fraction: fraction,
            optimizer_state_bytes: count * 16,
        };
        self.round_to_f32();
        self.epoch += 1;
        Ok(record)
    }

    /// Runs epochs until `until` (or the configured count), calling `on_epoch` after each.
    pub fn run(
        &mut self,
        images: &[Image],
        labels: Option<&[usize]>,
        until: Option<usize>,
        mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let stop = until.unwrap_or(self.config.epochs).min(self.config.epochs);
        let mut out = Vec::new();
        while self.epoch < stop {
            let r = self.run_epoch(images, labels)?;
            on_epoch(&r)?;
            out.push(r);
        }
        Ok(out)
    }

    /// Rounds all persisted state to `f32`, so a checkpoint captures it exactly.
    pub fn round_to_f32(&mut self) {
        self.model.params.round_to_f32();
        self.optimizer.round_to_f32();
        if let Some(t) = &mut self.teacher {
            t.round_to_f32();
        }
    }

    /// The adapted model without the self-supervised projection head.
    pub fn into_model(self) -> Model {
        let mut m = self.model;
        m.remove_dino_head();
        m
    }
}

/// Report label for a stage's regime: the adapter name, or `full` for full fine-tuning.
pub fn adapter_label(config: &StageConfig) -> String {
    match (config.stage, config.sa_mode) {
        (Stage::Sa, SaMode::Full) => "full".into(),
        _ => config.adapter.name().into(),
    }
}

/// Builds the adapter's mask, attaches its injected tensors, and freezes any
/// earlier-stage adapters the new regime does not cover (except under Full).
fn adapter_mask(model: &mut Model, spec: &AdapterSpec, seed: u64) -> Result<TrainabilityMask> {
    let (mut mask, injected) = build_mask(spec, &model.params, &model.config, seed)?;
    model.attach(injected)?;
    let full = matches!(spec, AdapterSpec::Full);
    for name in model.params.names() {
        if mask.get(name).is_none() && !name.starts_with(HEAD_PREFIX) && !name.starts_with(DINO_HEAD_PREFIX) {
            mask.set(name, Trainability::Whole(full && is_injected(name)));
        }
    }
    Ok(mask)
}

/// One supervised step: batch-mean cross entropy of the head over class embeddings.
pub fn sa_step(
    model: &mut Model,
    mask: &TrainabilityMask,
    optimizer: &mut OptimizerState,
    batch: &[(&Image, usize)],
    epoch: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let classes = model.num_classes().ok_or_else(|| contract_err("supervised step without a prediction head"))?;
    let mut grads = zero_grads(&model.params, mask);
    let mut total = 0.0;
    let trainable = |n: &str| mask.is_trainable(n);
    for &(image, label) in batch {
        if label >= classes {
            return Err(Error::Data(format!("label {label} outside the head's {classes} classes")));
        }
        let mut tape = Tape::new();
        let bb = BackboneVars::bind(&mut tape, &model.params, &model.config, &model.layout, &trainable)?;
        let mut recorded = bb.trainable.clone();
        let head = HeadVars::bind(&mut tape, &model.params, &trainable, &mut recorded)?;
        let cls = vit::forward_cls(&mut tape, &bb, image)?;
        let logits = head.forward(&mut tape, cls)?;
        let loss = tape.cross_entropy(logits, label)?;
        total += tape.value(loss)[0];
        if !recorded.is_empty() {
            accumulate_grads(&mut grads, &tape.backward(loss)?, &recorded)?;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    scale_grads(&mut grads, inv);
    apply_grad_mask(&mut grads, mask);
    adamw_step(&mut model.params, &grads, mask, optimizer, epoch)?;
    Ok(total * inv)
}

fn dataset_labels(data: &Dataset) -> Result<Vec<usize>> {
    Ok(data.require_labels()?.iter().map(|&l| l as usize).collect())
}

/// Self-supervised adaptation on unlabeled images; labels, if any, are ignored.
pub fn run_essa(model: Model, config: StageConfig, data: &Dataset) -> Result<(Model, Vec<EpochRecord>)> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut state = RunState::new_essa(model, config)?;
    let records = state.run(&data.images(), None, None, |_| Ok(()))?;
    Ok((state.into_model(), records))
}

/// Supervised adaptation; returns the model with its trained prediction head.
pub fn run_sa(model: Model, config: StageConfig, data: &Dataset) -> Result<(Model, Vec<EpochRecord>)> {
    let labels = dataset_labels(data)?;
    let classes = data.num_classes().unwrap_or(0);
    let mut state = RunState::new_sa(model, config, classes)?;
    let records = state.run(&data.images(), Some(&labels), None, |_| Ok(()))?;
    Ok((state.into_model(), records))
}

/// Test-time training on unlabeled test images with the prediction head frozen.
pub fn run_ttt(model: Model, config: StageConfig, data: &Dataset) -> Result<(Model, Vec<EpochRecord>)> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut state = RunState::new_ttt(model, config)?;
    let records = state.run(&data.images(), None, None, |_| Ok(()))?;
    Ok((state.into_model(), records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub adapter: String,
    pub trainable_count: usize,
    pub trainable_fraction: f64,
    /// Two 64-bit moments per trainable value.
    pub optimizer_state_bytes: usize,
    /// One 64-bit gradient per trainable value.
    pub grads_bytes: usize,
    pub measured_steps_per_sec: f64,
}

pub const WARMUP_STEPS: usize = 10;
pub const MEASURED_STEPS: usize = 50;

/// Trainable-set accounting for `spec`, with self-supervised steps per second
/// timed over 50 steps after 10 warm-up steps.
pub fn account_resources(spec: &AdapterSpec, model: &Model, config: &StageConfig, images: &[Image]) -> Result<ResourceReport> {
    if images.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let cfg = StageConfig { adapter: spec.clone(), stage: Stage::Essa, ..config.clone() };
    let mut state = RunState::new_essa(model.clone(), cfg)?;
    let (count, fraction) = state.trainable()?;
    let mut rng = SeededRng::new(state.config.seed, Stream::DataOrder);
    let mut started = None;
    for step in 0..WARMUP_STEPS + MEASURED_STEPS {
        if step == WARMUP_STEPS {
            started = Some(Instant::now());
        }
        let batch: Vec<_> = (0..state.config.batch_size)
            .map(|j| make_views(&images[(step * state.config.batch_size + j) % images.len()], &mut rng, &state.config.aug))
            .collect();
        let teacher = state.teacher.as_mut().ok_or_else(|| contract_err("missing teacher"))?;
        ssl_step(&mut state.model, teacher, &state.mask, &mut state.optimizer, &batch, 0)?;
    }
    let secs = started.map_or(0.0, |s| s.elapsed().as_secs_f64());
    Ok(ResourceReport {
        adapter: spec.name().into(),
        trainable_count: count,
        trainable_fraction: fraction,
        optimizer_state_bytes: count * 16,
        grads_bytes: count * 8,
        measured_steps_per_sec: MEASURED_STEPS as f64 / secs.max(1e-12),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;

    #[test]
    fn stage_config_validation() {
        let mut c = StageConfig::essa(AdapterSpec::Full);
        assert!(c.validate().is_ok());
        c.warmup_epochs = c.epochs;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = StageConfig { batch_size: 0, ..StageConfig::sa(AdapterSpec::BitFit, SaMode::Peft) };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ttt_needs_a_head() {
        let m = Model::new(ViTConfig::tiny(), 0).unwrap();
        assert!(matches!(RunState::new_ttt(m, StageConfig::ttt(AdapterSpec::BitFit)), Err(Error::Contract(_))));
    }

    #[test]
    fn sa_without_labels_is_a_data_error() {
        let m = Model::new(ViTConfig::tiny(), 0).unwrap();
        let mut s = RunState::new_sa(m, StageConfig::sa(AdapterSpec::Full, SaMode::Full), 2).unwrap();
        let img = crate::rng::uniform_image(0, &ViTConfig::tiny());
        assert!(matches!(s.run_epoch(&[img], None), Err(Error::Data(m)) if m == "labels required"));
    }

    #[test]
    fn full_mask_is_all_true() {
        let m = Model::new(ViTConfig::tiny(), 0).unwrap();
        let s = RunState::new_essa(m, StageConfig::essa(AdapterSpec::Full)).unwrap();
        assert!(s.mask.iter().all(|(_, t)| *t == Trainability::Whole(true)));
        assert_eq!(s.trainable().unwrap(), (ViTConfig::tiny().backbone_param_count(), 1.0));
    }
}
