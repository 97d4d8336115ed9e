//! Synthetic two-domain image classification data and the `ESDS` dataset file format.
//!
//! File layout, all integers little-endian:
//!
//! | offset | size | field         |
//! |--------|------|---------------|
//! | 0      | 4    | magic `ESDS`  |
//! | 4      | 2    | version (1)   |
//! | 6      | 4    | count         |
//! | 10     | 1    | channels      |
//! | 11     | 2    | height        |
//! | 13     | 2    | width         |
//! | 15     | 1    | label_present |
//!
//! followed by `count` records of `height·width·channels` bytes (row-major,
//! channels interleaved per pixel) and, when labeled, a `u16` label.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::standard_normal;

pub const MAGIC: &[u8; 4] = b"ESDS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

/// Labeled or unlabeled 8-bit images held in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
    labels: Option<Vec<u16>>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Dataset {
    /// Quantizes `[0, 1]` images to 8 bits.
    pub fn from_images(images: &[Image], labels: Option<Vec<u16>>) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Data("no images".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::Data(format!("{} labels for {} images", l.len(), images.len())));
            }
        }
        let mut pixels = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if (img.channels, img.height, img.width) != (c, h, w) {
                return Err(Error::Data("images differ in shape".into()));
            }
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        pixels.push(quantize(img.get(ch, y, x)));
                    }
                }
            }
        }
        Ok(Dataset { channels: c, height: h, width: w, pixels, labels })
    }

    fn record_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.record_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Image `i` with pixels mapped to `value / 255`.
    pub fn image(&self, i: usize) -> Image {
        let (c, h, w) = (self.channels, self.height, self.width);
        let rec = &self.pixels[i * self.record_len()..(i + 1) * self.record_len()];
        let mut img = Image::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    img.set(ch, y, x, rec[(y * w + x) * c + ch] as f64 / 255.0);
                }
            }
        }
        img
    }

    pub fn images(&self) -> Vec<Image> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[u16]> {
        self.labels().ok_or_else(|| Error::Data("labels required".into()))
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels().map(|l| l.iter().copied().max().map_or(0, |m| m as usize + 1))
    }

    pub fn without_labels(&self) -> Self {
        Dataset { labels: None, ..self.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let labeled = self.labels.is_some();
        let mut out = Vec::with_capacity(expected_len(self.len(), self.record_len(), labeled));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(labeled as u8);
        for (i, rec) in self.pixels.chunks_exact(self.record_len()).enumerate() {
            out.extend_from_slice(rec);
            if let Some(l) = &self.labels {
                out.extend_from_slice(&l[i].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "header truncated: expected {HEADER_LEN} bytes, found {}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic at offset 0: expected \"ESDS\", found {:?}", &bytes[0..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version} at offset 4 (expected {VERSION})")));
        }
        let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let channels = bytes[10] as usize;
        let height = u16::from_le_bytes([bytes[11], bytes[12]]) as usize;
        let width = u16::from_le_bytes([bytes[13], bytes[14]]) as usize;
        let labeled = match bytes[15] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("label_present at offset 15 must be 0 or 1, found {other}"))),
        };
        for (field, offset, v) in [("count", 6, count), ("channels", 10, channels), ("height", 11, height), ("width", 13, width)] {
            if v == 0 {
                return Err(Error::Format(format!("{field} at offset {offset} must be positive")));
            }
        }
        let rec = channels * height * width;
        let expected = expected_len(count, rec, labeled);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "length mismatch: header implies {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let stride = rec + 2 * labeled as usize;
        let mut pixels = Vec::with_capacity(count * rec);
        let mut labels = labeled.then(|| Vec::with_capacity(count));
        for r in bytes[HEADER_LEN..].chunks_exact(stride) {
            pixels.extend_from_slice(&r[..rec]);
            if let Some(l) = &mut labels {
                l.push(u16::from_le_bytes([r[rec], r[rec + 1]]));
            }
        }
        Ok(Dataset { channels, height, width, pixels, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// File length implied by a header.
pub fn expected_len(count: usize, record_len: usize, labeled: bool) -> usize {
    HEADER_LEN + count * (record_len + 2 * labeled as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Generator parameters. Class identity is carried by the absolute orientation
/// of a 2-D sinusoid, evenly spaced over `[0, π/2]`; the target domain applies a gamma curve, per-channel bias,
/// blur and noise, scaled by `shift_strength`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Cycles across the image.
    pub frequency: f64,
    pub frequency_jitter: f64,
    /// Standard deviation of the orientation around the class angle, radians.
    pub orientation_jitter: f64,
    pub amplitude: f64,
    pub pixel_noise: f64,
    pub shift_strength: f64,
    pub target_gamma: f64,
    pub target_channel_bias: Vec<f64>,
    pub target_noise: f64,
    pub target_blur: usize,
    pub target_contrast: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            name: "synth".into(),
            seed: 0,
            num_classes: 4,
            image_size: 32,
            channels: 3,
            train: 512,
            val: 128,
            test: 256,
            frequency: 3.0,
            frequency_jitter: 0.15,
            orientation_jitter: 0.1,
            amplitude: 0.3,
            pixel_noise: 0.03,
            shift_strength: 1.0,
            target_gamma: 0.5,
            target_channel_bias: vec![0.15, -0.1, 0.05],
            target_noise: 0.08,
            target_blur: 1,
            target_contrast: 0.6,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return bad(format!("num_classes must lie in [2, 65535], got {}", self.num_classes));
        }
        if self.image_size == 0 || self.image_size > u16::MAX as usize || self.channels == 0 || self.channels > 255 {
            return bad("image_size and channels must be positive and fit the file header".into());
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return bad("every split needs at least one sample".into());
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return bad(format!("shift_strength must lie in [0, 1], got {}", self.shift_strength));
        }
        if self.target_gamma.is_nan() || self.target_gamma <= 0.0 {
            return bad("target_gamma must be positive".into());
        }
        Ok(())
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn file_name(&self, split: Split, domain: Domain) -> String {
        format!("{}.{}.{}.esds", self.name, split.as_str(), domain.as_str())
    }
}

fn sample_rng(seed: u64, split: Split, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 62) | ((split as u64) << 40) | index as u64);
    rng
}

/// Class pattern of one sample; depends on (seed, split, index) only.
fn render_content(spec: &SynthSpec, split: Split, index: usize) -> (Image, u16) {
    let mut rng = sample_rng(spec.seed, split, index, 0);
    let label = (index % spec.num_classes) as u16;
    let n = spec.image_size;
    // Classes differ in the magnitude of the angle; its sign is random, so a
    // horizontal flip keeps every sample inside its class.
    let magnitude = 0.5 * PI * label as f64 / (spec.num_classes - 1) as f64;
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let theta = sign * magnitude + spec.orientation_jitter * standard_normal(&mut rng);
    let freq = spec.frequency * (1.0 + spec.frequency_jitter * rng.random_range(-1.0..=1.0));
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = spec.amplitude * (1.0 + 0.2 * rng.random_range(-1.0..=1.0));
    let background = 0.5 + 0.08 * rng.random_range(-1.0..=1.0);
    let tint: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.6..=1.0)).collect();
    let (ct, st) = (theta.cos(), theta.sin());
    let mut img = Image::zeros(spec.channels, n, n);
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 * ct + y as f64 * st) / n as f64;
            let wave = (2.0 * PI * freq * u + phase).sin();
            for (c, t) in tint.iter().enumerate() {
                let v = background + amp * t * wave + spec.pixel_noise * standard_normal(&mut rng);
                img.set(c, y, x, v);
            }
        }
    }
    (img, label)
}

fn box_blur(img: &Image, radius: usize) -> Image {
    let r = radius as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let mut out = Image::zeros(img.channels, img.height, img.width);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut n) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if (0..h).contains(&yy) && (0..w).contains(&xx) {
                            sum += img.get(c, yy as usize, xx as usize);
                            n += 1.0;
                        }
                    }
                }
                out.set(c, y as usize, x as usize, sum / n);
            }
        }
    }
    out
}

/// Target-domain transform at strength `s`; the identity at `s = 0`.
fn shift_domain(spec: &SynthSpec, img: &Image, split: Split, index: usize, s: f64) -> Image {
    if s == 0.0 {
        return img.clone();
    }
    let mut rng = sample_rng(spec.seed, split, index, 1);
    let blurred = if spec.target_blur > 0 { box_blur(img, spec.target_blur) } else { img.clone() };
    let gamma = 1.0 + s * (spec.target_gamma - 1.0);
    let contrast = 1.0 + s * (spec.target_contrast - 1.0);
    let mut out = img.clone();
    for c in 0..img.channels {
        let bias = s * spec.target_channel_bias.get(c).copied().unwrap_or(0.0);
        for y in 0..img.height {
            for x in 0..img.width {
                let v = (1.0 - s) * img.get(c, y, x) + s * blurred.get(c, y, x);
                let v = 0.5 + contrast * (v - 0.5);
                let v = v.clamp(0.0, 1.0).powf(gamma) + bias + s * spec.target_noise * standard_normal(&mut rng);
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// One split of one domain, labeled.
pub fn generate(spec: &SynthSpec, split: Split, domain: Domain) -> Result<Dataset> {
    spec.validate()?;
    let s = match domain {
        Domain::Source => 0.0,
        Domain::Target => spec.shift_strength,
    };
    let n = spec.split_len(split);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (img, label) = render_content(spec, split, i);
        images.push(shift_domain(spec, &img, split, i, s));
        labels.push(label);
    }
    Dataset::from_images(&images, Some(labels))
}

/// Writes all six split × domain files; returns their paths in write order.
pub fn write_all(spec: &SynthSpec, dir: &Path) -> Result<Vec<(PathBuf, usize)>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for split in Split::ALL {
        for domain in [Domain::Source, Domain::Target] {
            let ds = generate(spec, split, domain)?;
            let path = dir.join(spec.file_name(split, domain));
            ds.save(&path)?;
            out.push((path, ds.len()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec { image_size: 8, train: 12, val: 4, test: 6, ..SynthSpec::default() }
    }

    #[test]
    fn generation_is_deterministic_and_zero_shift_is_source() {
        let spec = small_spec();
        let a = generate(&spec, Split::Train, Domain::Target).unwrap();
        let b = generate(&spec, Split::Train, Domain::Target).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let src = generate(&spec, Split::Train, Domain::Source).unwrap();
        assert_ne!(a.to_bytes(), src.to_bytes());
        let zero = SynthSpec { shift_strength: 0.0, ..spec };
        assert_eq!(
            generate(&zero, Split::Train, Domain::Target).unwrap().to_bytes(),
            generate(&zero, Split::Train, Domain::Source).unwrap().to_bytes()
        );
    }

    #[test]
    fn round_trip_and_length_formula() {
        let ds = generate(&small_spec(), Split::Val, Domain::Source).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(bytes.len(), expected_len(4, 8 * 8 * 3, true));
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(Dataset::from_images(&back.images(), back.labels().map(<[u16]>::to_vec)).unwrap().to_bytes(), bytes);
        let unl = ds.without_labels();
        assert_eq!(unl.to_bytes().len(), expected_len(4, 8 * 8 * 3, false));
        assert!(matches!(unl.require_labels(), Err(Error::Data(m)) if m == "labels required"));
    }

    #[test]
    fn malformed_files_name_the_problem() {
        let bytes = generate(&small_spec(), Split::Val, Domain::Source).unwrap().to_bytes();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains(&bytes.len().to_string()) && err.contains(&(bytes.len() - 3).to_string()), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Dataset::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = bytes;
        bad[15] = 2;
        assert!(Dataset::from_bytes(&bad).unwrap_err().to_string().contains("offset 15"));
    }

    #[test]
    fn labels_are_balanced() {
        let ds = generate(&small_spec(), Split::Train, Domain::Source).unwrap();
        assert_eq!(ds.num_classes(), Some(4));
        for c in 0..4 {
            assert_eq!(ds.labels().unwrap().iter().filter(|&&l| l == c).count(), 3);
        }
    }
}
