//! AdamW with decoupled weight decay and a warm-up + cosine learning-rate schedule.
//!
//! Moment buffers are held only for trainable values: a whole-tensor entry keeps
//! `numel` moments, a column-subset entry keeps `rows · |columns|` moments in
//! row-major gather order. Frozen values are never read or written.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::peft::{Trainability, TrainabilityMask};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    /// Linear ramp from `base/warmup` to `base`, then cosine decay towards zero.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = self.total_epochs.saturating_sub(self.warmup_epochs).max(1) as f64;
        let progress = ((epoch - self.warmup_epochs) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.04 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

/// Weight decay applies to weight matrices only.
pub fn decays(name: &str, tensor: &Tensor) -> bool {
    name.ends_with(".weight") && tensor.rank() == 2
}

fn trainable_len(t: &Tensor, tr: &Trainability) -> usize {
    match tr {
        Trainability::Whole(true) => t.numel(),
        Trainability::Whole(false) => 0,
        Trainability::Columns(cols) => t.as_matrix_dims().0 * cols.len(),
    }
}

impl OptimizerState {
    /// Allocates zeroed moments for every trainable entry of `mask`.
    pub fn new(
        config: AdamWConfig,
        schedule: LrSchedule,
        params: &ParamStore,
        mask: &TrainabilityMask,
    ) -> Result<Self> {
        let mut moments = IndexMap::new();
        for (name, t) in params.iter() {
            let tr = mask.get(name).ok_or_else(|| contract_err(format!("mask has no entry for `{name}`")))?;
            let n = trainable_len(t, tr);
            if n > 0 {
                moments.insert(name.to_string(), Moments { m: vec![0.0; n], v: vec![0.0; n] });
            }
        }
        Ok(OptimizerState { config, schedule, step: 0, moments })
    }

    /// Number of scalars held across both moment buffers.
    pub fn state_len(&self) -> usize {
        self.moments.values().map(|m| m.m.len() + m.v.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for mo in self.moments.values_mut() {
            for x in mo.m.iter_mut().chain(mo.v.iter_mut()) {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// One AdamW update of every trainable value, at the learning rate for `epoch`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    mask: &TrainabilityMask,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<()> {
    let lr = state.schedule.lr_at(epoch);
    let AdamWConfig { beta1, beta2, eps, weight_decay } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (name, p) in params.iter_mut() {
        let tr = mask.get(name).ok_or_else(|| contract_err(format!("mask has no entry for `{name}`")))?;
        if matches!(tr, Trainability::Whole(false)) {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| contract_err(format!("missing gradient for trainable parameter `{name}`")))?;
        if !g.same_shape(p) {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let wd = if decays(name, p) { weight_decay } else { 0.0 };
        let mo = state
            .moments
            .get_mut(name)
            .ok_or_else(|| contract_err(format!("no optimizer moments for `{name}`")))?;
        let (_, cols) = p.as_matrix_dims();
        let mut update = |slot: usize, idx: usize, data: &mut [f64]| {
            let gi = g.data()[idx];
            let m = beta1 * mo.m[slot] + (1.0 - beta1) * gi;
            let v = beta2 * mo.v[slot] + (1.0 - beta2) * gi * gi;
            mo.m[slot] = m;
            mo.v[slot] = v;
            let mut x = data[idx];
            x *= 1.0 - lr * wd;
            x -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            data[idx] = x;
        };
        let data = p.data_mut();
        match tr {
            Trainability::Whole(_) => {
                for i in 0..data.len() {
                    update(i, i, data);
                }
            }
            Trainability::Columns(idx) => {
                let rows = data.len() / cols;
                let mut slot = 0;
                for r in 0..rows {
                    for &c in idx {
                        update(slot, r * cols + c, data);
                        slot += 1;
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_scalar(value: f64) -> (ParamStore, TrainabilityMask) {
        let mut p = ParamStore::new();
        p.insert("x.bias", Tensor::vector(vec![value]));
        let mut mask = TrainabilityMask::default();
        mask.set("x.bias", Trainability::Whole(true));
        (p, mask)
    }

    #[test]
    fn single_scalar_step_matches_hand_evaluation() {
        let (mut p, mask) = one_scalar(1.0);
        let mut g = ParamStore::new();
        g.insert("x.bias", Tensor::vector(vec![1.0]));
        let cfg = AdamWConfig { beta1: 0.0, beta2: 0.0, eps: 1e-8, weight_decay: 0.0 };
        let sched = LrSchedule { base_lr: 0.1, warmup_epochs: 0, total_epochs: 10 };
        let mut st = OptimizerState::new(cfg, sched, &p, &mask).unwrap();
        adamw_step(&mut p, &g, &mask, &mut st, 0).unwrap();
        // m̂ = 1, v̂ = 1: x = 1 − 0.1 · 1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert_eq!(p.get("x.bias").unwrap().data()[0], expected);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn warmup_then_cosine() {
        let s = LrSchedule { base_lr: 1.0, warmup_epochs: 10, total_epochs: 100 };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(9), 1.0);
        assert_eq!(s.lr_at(10), 1.0);
        assert!((s.lr_at(55) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(99) < 0.001);
        assert!(s.lr_at(99) > 0.0);
    }

    #[test]
    fn frozen_values_untouched_and_missing_gradient_rejected() {
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        p.insert("b.bias", Tensor::vector(vec![2.0; 3]));
        let mut mask = TrainabilityMask::default();
        mask.set("a.weight", Trainability::Columns(vec![1]));
        mask.set("b.bias", Trainability::Whole(false));
        let mut g = ParamStore::new();
        g.insert("a.weight", Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
        let sched = LrSchedule { base_lr: 0.1, warmup_epochs: 1, total_epochs: 5 };
        let mut st = OptimizerState::new(AdamWConfig::default(), sched, &p, &mask).unwrap();
        assert_eq!(st.state_len(), 2 * 2);
        adamw_step(&mut p, &g, &mask, &mut st, 0).unwrap();
        let w = p.get("a.weight").unwrap().data();
        assert_eq!([w[0], w[2], w[3], w[5]], [1.0; 4]);
        assert!(w[1] < 1.0 && w[4] < 1.0);
        assert_eq!(p.get("b.bias").unwrap().data(), &[2.0; 3]);

        mask.set("b.bias", Trainability::Whole(true));
        let mut st = OptimizerState::new(AdamWConfig::default(), sched, &p, &mask).unwrap();
        assert!(matches!(adamw_step(&mut p, &g, &mask, &mut st, 0), Err(Error::Contract(_))));
    }
}
