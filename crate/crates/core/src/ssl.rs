//! Self-distillation between a student and an EMA teacher over two augmented views.
//!
//! The student's class embedding passes through a projection head whose last
//! layer scores L2-normalized features against L2-normalized prototypes. The
//! teacher's centered, sharpened distribution over prototypes is the target for
//! the student's distribution on the other view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::image::Image;
use crate::model::{accumulate_grads, scale_grads, zero_grads, Model, DINO_HEAD_PREFIX};
use crate::optim::{adamw_step, OptimizerState};
use crate::peft::{apply_grad_mask, AdapterLayout, TrainabilityMask};
use crate::rng::{standard_normal, truncated_normal};
use crate::tensor::{ParamStore, Tensor};
use crate::vit::{self, BackboneVars, LinearVars, ViTConfig, INIT_STD};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DinoHeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl DinoHeadConfig {
    /// Hidden width `4·d`, bottleneck `d`; 64 prototypes on the tiny preset, 256 otherwise.
    pub fn for_backbone(config: &ViTConfig) -> Self {
        let d = config.embed_dim;
        let prototypes = if config.preset_name() == Some("tiny") { 64 } else { 256 };
        DinoHeadConfig { hidden: 4 * d, bottleneck: d, prototypes }
    }
}

/// Temperatures and momenta of the distillation objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub teacher_momentum: f64,
    pub center_momentum: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig { tau_student: 0.1, tau_teacher: 0.04, teacher_momentum: 0.996, center_momentum: 0.9 }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_teacher > 0.0 && self.tau_teacher <= self.tau_student) {
            return Err(Error::Config(format!(
                "temperatures need 0 < tau_teacher <= tau_student, got {} and {}",
                self.tau_teacher, self.tau_student
            )));
        }
        for (name, m) in [("teacher_momentum", self.teacher_momentum), ("center_momentum", self.center_momentum)] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {m}")));
            }
        }
        Ok(())
    }
}

/// Adds a freshly initialized projection head under `dino_head.`.
pub fn init_dino_head(params: &mut ParamStore, embed_dim: usize, head: &DinoHeadConfig, rng: &mut impl Rng) -> Result<()> {
    let DinoHeadConfig { hidden, bottleneck, prototypes } = *head;
    let mut add = |name: &str, rows: usize, cols: usize| -> Result<()> {
        let mut t = Tensor::matrix(rows, cols, truncated_normal(rng, rows * cols, INIT_STD))?;
        t.round_to_f32();
        params.insert(format!("{DINO_HEAD_PREFIX}{name}"), t);
        Ok(())
    };
    add("fc1.weight", hidden, embed_dim)?;
    add("fc2.weight", bottleneck, hidden)?;
    add("prototypes.weight", prototypes, bottleneck)?;
    params.insert(format!("{DINO_HEAD_PREFIX}fc1.bias"), Tensor::zeros(&[hidden]));
    params.insert(format!("{DINO_HEAD_PREFIX}fc2.bias"), Tensor::zeros(&[bottleneck]));
    Ok(())
}

pub fn dino_head_prototypes(params: &ParamStore) -> Result<usize> {
    Ok(params.require(&format!("{DINO_HEAD_PREFIX}prototypes.weight"))?.shape()[0])
}

/// Projection head bound to a tape.
pub struct DinoHeadVars {
    pub fc1: LinearVars,
    pub fc2: LinearVars,
    pub prototypes: Var,
}

impl DinoHeadVars {
    pub fn bind<'p>(
        tape: &mut Tape<'p>,
        params: &'p ParamStore,
        trainable: &dyn Fn(&str) -> bool,
        recorded: &mut Vec<(String, Var)>,
    ) -> Result<Self> {
        let mut leaf = |tape: &mut Tape<'p>, short: &str| -> Result<Var> {
            let name = format!("{DINO_HEAD_PREFIX}{short}");
            let grad = trainable(&name);
            let v = tape.leaf_ref(params.require(&name)?, grad);
            if grad {
                recorded.push((name, v));
            }
            Ok(v)
        };
        let fc1 = LinearVars { weight: leaf(tape, "fc1.weight")?, bias: leaf(tape, "fc1.bias")?, lora: None };
        let fc2 = LinearVars { weight: leaf(tape, "fc2.weight")?, bias: leaf(tape, "fc2.bias")?, lora: None };
        let prototypes = leaf(tape, "prototypes.weight")?;
        Ok(DinoHeadVars { fc1, fc2, prototypes })
    }

    /// Prototype logits `[n×K]` for class embeddings `[n×d]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = vit::linear(tape, x, &self.fc1, 0.0)?;
        let h = tape.gelu(h);
        let z = vit::linear(tape, h, &self.fc2, 0.0)?;
        let z = tape.l2_normalize_rows(z, NORM_EPS);
        let w = tape.l2_normalize_rows(self.prototypes, NORM_EPS);
        tape.matmul_nt(z, w)
    }
}

/// EMA copy of the student with the running center of teacher logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    pub center: Vec<f64>,
    pub config: SslConfig,
}

impl TeacherState {
    /// Teacher initialized as an exact copy of the student's backbone, adapters and projection head.
    pub fn from_student(student: &Model, config: SslConfig) -> Result<Self> {
        config.validate()?;
        let params = teacher_view(&student.params);
        let k = dino_head_prototypes(&params)?;
        Ok(TeacherState { params, center: vec![0.0; k], config })
    }

    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        for c in &mut self.center {
            *c = *c as f32 as f64;
        }
    }
}

/// Student entries the teacher tracks: everything except the prediction head.
fn teacher_view(student: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in student.iter().filter(|(n, _)| !n.starts_with(crate::model::HEAD_PREFIX)) {
        out.insert(name, t.clone());
    }
    out
}

/// Two augmented renderings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub first: Image,
    pub second: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub crop: bool,
    pub flip: bool,
    pub jitter: bool,
    pub noise: bool,
    pub min_crop_scale: f64,
    pub jitter_strength: f64,
    pub noise_std: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop: true,
            flip: true,
            jitter: true,
            noise: true,
            min_crop_scale: 0.5,
            jitter_strength: 0.2,
            noise_std: 0.02,
        }
    }
}

impl AugConfig {
    pub fn all_off() -> Self {
        AugConfig { crop: false, flip: false, jitter: false, noise: false, ..AugConfig::default() }
    }

    fn any(&self) -> bool {
        self.crop || self.flip || self.jitter || self.noise
    }
}

pub fn make_views(image: &Image, rng: &mut impl Rng, aug: &AugConfig) -> ViewPair {
    ViewPair { first: augment(image, rng, aug), second: augment(image, rng, aug) }
}

/// Random resized crop, horizontal flip, brightness/contrast jitter and
/// Gaussian noise, each switchable; output clamped to `[0, 1]`.
pub fn augment(image: &Image, rng: &mut impl Rng, aug: &AugConfig) -> Image {
    if !aug.any() {
        return image.clone();
    }
    let mut out = if aug.crop { resized_crop(image, rng, aug.min_crop_scale) } else { image.clone() };
    if aug.flip && rng.random::<f64>() < 0.5 {
        let w = out.width;
        for row in out.data.chunks_exact_mut(w) {
            row.reverse();
        }
    }
    if aug.jitter {
        let s = aug.jitter_strength;
        let brightness = rng.random_range(-s..=s);
        let contrast = 1.0 + rng.random_range(-s..=s);
        let mean = out.data.iter().sum::<f64>() / out.data.len() as f64;
        for v in &mut out.data {
            *v = (*v - mean) * contrast + mean + brightness;
        }
    }
    if aug.noise {
        for v in &mut out.data {
            *v += aug.noise_std * standard_normal(rng);
        }
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Square crop covering a uniform fraction in `[min_scale, 1]` of the area,
/// resampled bilinearly to the input size.
fn resized_crop(image: &Image, rng: &mut impl Rng, min_scale: f64) -> Image {
    let (h, w) = (image.height as f64, image.width as f64);
    let scale = rng.random_range(min_scale..=1.0);
    let ch = (scale.sqrt() * h).min(h);
    let cw = (scale.sqrt() * w).min(w);
    let top = rng.random::<f64>() * (h - ch);
    let left = rng.random::<f64>() * (w - cw);
    let mut out = Image::zeros(image.channels, image.height, image.width);
    for y in 0..image.height {
        let sy = (top + (y as f64 + 0.5) * ch / h - 0.5).clamp(0.0, h - 1.0);
        let (y0, fy) = (sy.floor() as usize, sy.fract());
        let y1 = (y0 + 1).min(image.height - 1);
        for x in 0..image.width {
            let sx = (left + (x as f64 + 0.5) * cw / w - 0.5).clamp(0.0, w - 1.0);
            let (x0, fx) = (sx.floor() as usize, sx.fract());
            let x1 = (x0 + 1).min(image.width - 1);
            for c in 0..image.channels {
                let top_row = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
                let bottom_row = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
                out.set(c, y, x, top_row * (1.0 - fy) + bottom_row * fy);
            }
        }
    }
    out
}

/// Sharpened, centered teacher distributions, one row per view.
pub fn teacher_targets(teacher_logits: &[f64], center: &[f64], tau_t: f64) -> Result<Vec<f64>> {
    let k = center.len();
    if k == 0 || !teacher_logits.len().is_multiple_of(k) {
        return Err(shape_err(format!(
            "{} teacher logits do not split into rows of {k}",
            teacher_logits.len()
        )));
    }
    let centered: Vec<f64> =
        teacher_logits.chunks_exact(k).flat_map(|row| row.iter().zip(center).map(|(t, c)| t - c)).collect();
    let t = Tensor::matrix(teacher_logits.len() / k, k, centered)?;
    Ok(autodiff::softmax(&t, tau_t)?.into_data())
}

/// Cross-view distillation loss on the tape. The teacher side is read as a
/// constant, so no gradient reaches it.
pub fn dino_loss_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &[f64],
    center: &[f64],
    tau_s: f64,
    tau_t: f64,
) -> Result<Var> {
    let (rows, k) = tape.dims(student_logits);
    if rows != 2 || teacher_logits.len() != 2 * k || center.len() != k {
        return Err(shape_err(format!(
            "distillation loss needs [2×K] logits and a [K] center; got student [{rows}×{k}], {} teacher values, center {}",
            teacher_logits.len(),
            center.len()
        )));
    }
    if tau_s.is_nan() || tau_s <= 0.0 {
        return Err(Error::Domain(format!("student temperature must be positive, got {tau_s}")));
    }
    let t = teacher_targets(teacher_logits, center, tau_t)?;
    let log_s = tape.log_softmax(student_logits, tau_s)?;
    // Row 0 of the student meets the teacher's row 1, and vice versa.
    let weights: Vec<f64> = t[k..].iter().chain(&t[..k]).map(|p| -0.5 * p).collect();
    tape.dot_const(log_s, weights)
}

/// `mean over v ≠ w of −Σ_k t_v[k]·log s_w[k]` for `[2×K]` logits.
pub fn dino_loss(student: &Tensor, teacher: &Tensor, center: &[f64], tau_s: f64, tau_t: f64) -> Result<f64> {
    if student.rank() != 2 || teacher.rank() != 2 {
        return Err(shape_err("distillation loss expects [2×K] logit matrices"));
    }
    let mut tape = Tape::new();
    let s = tape.leaf_ref(student, false);
    let l = dino_loss_on_tape(&mut tape, s, teacher.data(), center, tau_s, tau_t)?;
    Ok(tape.value(l)[0])
}

/// `θ_t ← λ·θ_t + (1−λ)·θ_s` over every teacher entry; equal values stay bit-identical.
pub fn update_teacher(teacher: &mut ParamStore, student: &ParamStore, momentum: f64) -> Result<()> {
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name).ok_or_else(|| contract_err(format!("student has no `{name}`")))?;
        if !s.same_shape(t) {
            return Err(contract_err(format!(
                "teacher `{name}` {:?} differs from student {:?}",
                t.shape(),
                s.shape()
            )));
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            if *a != b {
                let mixed = momentum * *a + (1.0 - momentum) * b;
                *a = mixed.clamp(a.min(b), a.max(b));
            }
        }
    }
    Ok(())
}

/// `c ← m·c + (1−m)·mean(rows)`.
pub fn update_center(center: &mut [f64], teacher_logits: &[f64], momentum: f64) -> Result<()> {
    let k = center.len();
    if k == 0 || teacher_logits.is_empty() || !teacher_logits.len().is_multiple_of(k) {
        return Err(shape_err(format!("{} teacher logits for a center of {k}", teacher_logits.len())));
    }
    let n = (teacher_logits.len() / k) as f64;
    for (j, c) in center.iter_mut().enumerate() {
        // Mean as offset from the first row, exact for constant columns.
        let first = teacher_logits[j];
        let dev: f64 = teacher_logits.iter().skip(j).step_by(k).map(|v| v - first).sum();
        let mean = first + dev / n;
        *c = momentum * *c + (1.0 - momentum) * mean;
    }
    Ok(())
}

/// Prototype logits `[2×K]` of a view pair, without gradient recording.
pub fn pair_logits(params: &ParamStore, config: &ViTConfig, layout: &AdapterLayout, pair: &ViewPair) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bb = BackboneVars::bind(&mut tape, params, config, layout, &|_| false)?;
    let head = DinoHeadVars::bind(&mut tape, params, &|_| false, &mut Vec::new())?;
    let logits = student_pair_forward(&mut tape, &bb, &head, pair)?;
    Ok(tape.value(logits).to_vec())
}

fn student_pair_forward(tape: &mut Tape, bb: &BackboneVars, head: &DinoHeadVars, pair: &ViewPair) -> Result<Var> {
    let a = vit::forward_cls(tape, bb, &pair.first)?;
    let b = vit::forward_cls(tape, bb, &pair.second)?;
    let both = tape.concat_rows(&[a, b])?;
    head.forward(tape, both)
}

/// Loss and summed gradients of the distillation objective for one view pair.
pub(crate) fn pair_loss_and_grads(
    student: &Model,
    mask: &TrainabilityMask,
    teacher_logits: &[f64],
    center: &[f64],
    config: &SslConfig,
    pair: &ViewPair,
    grads: &mut ParamStore,
) -> Result<f64> {
    let trainable = |n: &str| mask.is_trainable(n);
    let mut tape = Tape::new();
    let bb = BackboneVars::bind(&mut tape, &student.params, &student.config, &student.layout, &trainable)?;
    let mut recorded = bb.trainable.clone();
    let head = DinoHeadVars::bind(&mut tape, &student.params, &trainable, &mut recorded)?;
    let logits = student_pair_forward(&mut tape, &bb, &head, pair)?;
    let loss = dino_loss_on_tape(&mut tape, logits, teacher_logits, center, config.tau_student, config.tau_teacher)?;
    let value = tape.value(loss)[0];
    if !recorded.is_empty() {
        let g = tape.backward(loss)?;
        accumulate_grads(grads, &g, &recorded)?;
    }
    Ok(value)
}

/// One optimization step: teacher forward, student loss, backward, masking,
/// AdamW, teacher EMA and center update, in that order. Returns the batch-mean loss.
pub fn ssl_step(
    student: &mut Model,
    teacher: &mut TeacherState,
    mask: &TrainabilityMask,
    optimizer: &mut OptimizerState,
    batch: &[ViewPair],
    epoch: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut teacher_logits = Vec::with_capacity(batch.len());
    for pair in batch {
        teacher_logits.push(pair_logits(&teacher.params, &student.config, &student.layout, pair)?);
    }
    let mut grads = zero_grads(&student.params, mask);
    let mut total = 0.0;
    for (pair, tl) in batch.iter().zip(&teacher_logits) {
        total += pair_loss_and_grads(student, mask, tl, &teacher.center, &teacher.config, pair, &mut grads)?;
    }
    let inv = 1.0 / batch.len() as f64;
    scale_grads(&mut grads, inv);
    apply_grad_mask(&mut grads, mask);
    adamw_step(&mut student.params, &grads, mask, optimizer, epoch)?;
    update_teacher(&mut teacher.params, &student.params, teacher.config.teacher_momentum)?;
    let all: Vec<f64> = teacher_logits.concat();
    update_center(&mut teacher.center, &all, teacher.config.center_momentum)?;
    Ok(total * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{uniform_image, SeededRng, Stream};

    #[test]
    fn uniform_logits_give_log_k() {
        let s = Tensor::matrix(2, 8, vec![0.3; 16]).unwrap();
        let t = Tensor::matrix(2, 8, vec![-1.0; 16]).unwrap();
        let l = dino_loss(&s, &t, &[0.0; 8], 0.1, 0.04).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sharp_teacher_reads_student_log_probability() {
        // Student log-softmax at class 0 equals -0.1 in both rows.
        let k = 4;
        let p0 = (-0.1f64).exp();
        let rest = ((1.0 - p0) / 3.0).ln();
        let row = [-0.1, rest, rest, rest];
        let s = Tensor::matrix(2, k, [row, row].concat()).unwrap();
        let t = Tensor::matrix(2, k, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let l = dino_loss(&s, &t, &[0.0; 4], 1.0, 1e-3).unwrap();
        assert!((l - 0.1).abs() < 1e-9, "{l}");
    }

    #[test]
    fn temperatures_must_be_positive() {
        let s = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(dino_loss(&s, &s, &[0.0; 2], 0.0, 0.04), Err(Error::Domain(_))));
        assert!(matches!(dino_loss(&s, &s, &[0.0; 2], 0.1, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn ema_endpoints() {
        let mut t = ParamStore::new();
        t.insert("x", Tensor::vector(vec![2.0, -1.0]));
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![4.0, 7.5]));
        let mut a = t.clone();
        update_teacher(&mut a, &s, 1.0).unwrap();
        assert_eq!(a, t);
        let mut b = t.clone();
        update_teacher(&mut b, &s, 0.0).unwrap();
        assert_eq!(b.get("x"), s.get("x"));
        let mut c = t.clone();
        update_teacher(&mut c, &s, 0.5).unwrap();
        assert_eq!(c.get("x").unwrap().data()[0], 3.0);
        s.insert("x", Tensor::vector(vec![1.0]));
        assert!(matches!(update_teacher(&mut c, &s, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn center_endpoints() {
        let mut c = vec![1.0, 2.0];
        update_center(&mut c, &[5.0, 6.0, 7.0, 8.0], 1.0).unwrap();
        assert_eq!(c, [1.0, 2.0]);
        update_center(&mut c, &[0.1, 0.7, 0.1, 0.7, 0.1, 0.7], 0.0).unwrap();
        assert_eq!(c, [0.1, 0.7]);
    }

    #[test]
    fn all_off_views_equal_input_and_views_are_seeded() {
        let cfg = ViTConfig::tiny();
        let img = uniform_image(3, &cfg);
        let mut rng = SeededRng::new(0, Stream::Augment);
        let v = make_views(&img, &mut rng, &AugConfig::all_off());
        assert_eq!(v.first, img);
        assert_eq!(v.second, img);
        let a = make_views(&img, &mut SeededRng::new(5, Stream::Augment), &AugConfig::default());
        let b = make_views(&img, &mut SeededRng::new(5, Stream::Augment), &AugConfig::default());
        assert_eq!(a, b);
        assert_ne!(a.first, a.second);
        assert!(a.first.data.iter().chain(&a.second.data).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn full_scale_crop_is_identity() {
        let cfg = ViTConfig::tiny();
        let img = uniform_image(4, &cfg);
        let aug = AugConfig { crop: true, min_crop_scale: 1.0, ..AugConfig::all_off() };
        let out = augment(&img, &mut SeededRng::new(1, Stream::Augment), &aug);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_prototype_rows_are_normalized_in_use() {
        let mut p = ParamStore::new();
        let hc = DinoHeadConfig { hidden: 8, bottleneck: 4, prototypes: 5 };
        init_dino_head(&mut p, 3, &hc, &mut SeededRng::new(0, Stream::HeadInit)).unwrap();
        let mut tape = Tape::new();
        let h = DinoHeadVars::bind(&mut tape, &p, &|_| false, &mut Vec::new()).unwrap();
        let x = tape.leaf(1, 3, vec![1.0, -2.0, 0.5], false).unwrap();
        let logits = h.forward(&mut tape, x).unwrap();
        assert_eq!(tape.dims(logits), (1, 5));
        // Cosine similarities between unit vectors.
        assert!(tape.value(logits).iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }
}
