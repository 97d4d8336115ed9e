//! Stage-level behaviour of the adaptation pipeline.

use essa_core::checkpoint::Checkpoint;
use essa_core::data::Dataset;
use essa_core::eval::{evaluate_head, Metric};
use essa_core::model::Model;
use essa_core::peft::{is_head, AdapterSpec, Trainability};
use essa_core::pipeline::{account_resources, run_essa, run_sa, run_ttt, RunState, SaMode, StageConfig};
use essa_core::rng::{standard_normal, SeededRng, Stream};
use essa_core::vit::{is_bias, ViTConfig};
use essa_core::{Image, ParamStore};

fn specs(seed: u64) -> Vec<AdapterSpec> {
    vec![AdapterSpec::Full, AdapterSpec::lora_default(), AdapterSpec::vpt_default(), AdapterSpec::BitFit, AdapterSpec::apla_default(seed)]
}

/// Two classes that differ only in overall brightness.
fn bright_dark(n: usize, cfg: &ViTConfig, seed: u64) -> Dataset {
    let mut rng = SeededRng::new(seed, Stream::Probe);
    let len = cfg.channels * cfg.image_size * cfg.image_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let level = if i % 2 == 0 { 0.25 } else { 0.75 };
        let data = (0..len).map(|_| (level + 0.05 * standard_normal(&mut rng)).clamp(0.0, 1.0)).collect();
        images.push(Image::new(cfg.channels, cfg.image_size, cfg.image_size, data).unwrap());
        labels.push((i % 2) as u16);
    }
    Dataset::from_images(&images, Some(labels)).unwrap()
}

fn short(base: StageConfig, epochs: usize) -> StageConfig {
    StageConfig { epochs, warmup_epochs: 1, batch_size: 4, ..base }
}

fn changed(before: &ParamStore, after: &ParamStore, name: &str) -> bool {
    before.get(name).unwrap().data() != after.get(name).unwrap().data()
}

#[test]
fn stages_compose_for_every_preset_and_adapter() {
    for cfg in [ViTConfig::tiny(), ViTConfig::small()] {
        let data = bright_dark(4, &cfg, 1);
        for spec in specs(3) {
            let name = spec.name();
            let essa = run_essa(Model::new(cfg, 0).unwrap(), short(StageConfig::essa(spec.clone()), 2), &data).unwrap().0;
            let essa = roundtrip(&essa);
            let sa = run_sa(essa, short(StageConfig::sa(spec.clone(), SaMode::Peft), 2), &data).unwrap().0;
            let sa = roundtrip(&sa);
            let ttt = run_ttt(sa.clone(), short(StageConfig::ttt(spec), 2), &data.without_labels()).unwrap().0;
            roundtrip(&ttt);
            for head in ["head.weight", "head.bias"] {
                assert!(!changed(&sa.params, &ttt.params, head), "{name}: {head} moved during test-time training");
            }
        }
    }
}

fn roundtrip(model: &Model) -> Model {
    let bytes = Checkpoint::from_model(model).to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let restored = back.model().unwrap();
    assert_eq!(&restored.params, &model.params);
    restored
}

#[test]
fn supervised_training_separates_brightness_classes() {
    let cfg = ViTConfig::tiny();
    let data = bright_dark(32, &cfg, 2);
    let config = StageConfig { batch_size: 8, ..StageConfig::sa(AdapterSpec::Full, SaMode::Full) };
    let model = run_sa(Model::new(cfg, 0).unwrap(), config, &data).unwrap().0;
    let acc = evaluate_head(&model, &data, Metric::Accuracy).unwrap().value;
    assert!(acc >= 0.95, "training accuracy {acc}");
}

#[test]
fn raw_backbone_transfer_builds_no_distillation_state() {
    let cfg = ViTConfig::tiny();
    let state = RunState::new_sa(Model::new(cfg, 0).unwrap(), StageConfig::sa(AdapterSpec::Full, SaMode::Full), 2).unwrap();
    assert!(state.teacher.is_none());
    assert!(state.model.params.names().all(|n| !n.starts_with("dino_head.")));
}

#[test]
fn full_supervised_training_moves_every_backbone_tensor() {
    let cfg = ViTConfig::tiny();
    let data = bright_dark(8, &cfg, 3);
    let before = Model::new(cfg, 0).unwrap();
    let after = run_sa(before.clone(), short(StageConfig::sa(AdapterSpec::Full, SaMode::Full), 2), &data).unwrap().0;
    for name in before.params.names() {
        assert!(changed(&before.params, &after.params, name), "{name} unchanged");
    }
}

#[test]
fn test_time_training_respects_the_adapter() {
    let cfg = ViTConfig::tiny();
    let data = bright_dark(8, &cfg, 4);
    let trained = run_sa(Model::new(cfg, 0).unwrap(), short(StageConfig::sa(AdapterSpec::Full, SaMode::Full), 2), &data).unwrap().0;
    let unlabeled = data.without_labels();
    let full = run_ttt(trained.clone(), short(StageConfig::ttt(AdapterSpec::Full), 2), &unlabeled).unwrap().0;
    let bitfit = run_ttt(trained.clone(), short(StageConfig::ttt(AdapterSpec::BitFit), 2), &unlabeled).unwrap().0;
    for name in trained.params.names() {
        if is_head(name) {
            assert!(!changed(&trained.params, &full.params, name));
            assert!(!changed(&trained.params, &bitfit.params, name));
            continue;
        }
        assert!(changed(&trained.params, &full.params, name), "full left {name} unchanged");
        assert_eq!(changed(&trained.params, &bitfit.params, name), is_bias(name), "bitfit and {name}");
    }
}

#[test]
fn apla_frozen_columns_survive_a_full_run() {
    let cfg = ViTConfig::tiny();
    let data = bright_dark(8, &cfg, 5);
    let before = Model::new(cfg, 0).unwrap();
    let config = short(StageConfig::essa(AdapterSpec::apla_default(7)), 3);
    let state = RunState::new_essa(before.clone(), config.clone()).unwrap();
    let after = run_essa(before.clone(), config, &data).unwrap().0;
    let mut moved = 0;
    for name in before.params.names() {
        let (a, b) = (before.params.get(name).unwrap(), after.params.get(name).unwrap());
        let cols = a.shape().last().copied().unwrap_or(1);
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let trainable = match state.mask.get(name) {
                Some(Trainability::Columns(c)) => c.contains(&(i % cols)),
                Some(Trainability::Whole(on)) => *on,
                None => false,
            };
            if trainable {
                moved += usize::from(x != y);
            } else {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}[{i}]");
            }
        }
    }
    assert!(moved > 0);
}

#[test]
fn bitfit_fraction_is_bias_share_and_peft_needs_less_optimizer_state() {
    let cfg = ViTConfig::tiny();
    let model = Model::new(cfg, 0).unwrap();
    let images = bright_dark(4, &cfg, 6).images();
    let stage = short(StageConfig::essa(AdapterSpec::Full), 2);
    let full = account_resources(&AdapterSpec::Full, &model, &stage, &images).unwrap();
    assert_eq!(full.trainable_fraction, 1.0);
    let total: usize = model.params.iter().map(|(_, t)| t.numel()).sum();
    let biases: usize = model.params.iter().filter(|(n, _)| is_bias(n)).map(|(_, t)| t.numel()).sum();
    let bitfit = account_resources(&AdapterSpec::BitFit, &model, &stage, &images).unwrap();
    assert_eq!(bitfit.trainable_count, biases);
    assert_eq!(bitfit.trainable_fraction, biases as f64 / total as f64);
    for spec in specs(0).into_iter().skip(1) {
        let r = account_resources(&spec, &model, &stage, &images).unwrap();
        assert!(r.optimizer_state_bytes < full.optimizer_state_bytes, "{}", spec.name());
        assert_eq!(r.grads_bytes, 8 * r.trainable_count);
    }
}
