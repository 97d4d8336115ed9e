//! Seeded random streams with persistable positions.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::vit::ViTConfig;

/// Independent purposes draw from independent streams of the same seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    DataOrder = 1,
    Augment = 2,
    HeadInit = 3,
    Probe = 4,
    Inject = 5,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream(seed, stream as u64)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        SeededRng { seed, rng }
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed, stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() }
    }

    pub fn restore(state: RngState) -> Self {
        let mut r = Self::with_stream(state.seed, state.stream);
        r.rng.set_word_pos(state.word_pos);
        r
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Normal samples with standard deviation `std`, redrawn outside ±2·std.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Image with independent uniform pixels, for tests and probes.
pub fn uniform_image(seed: u64, config: &ViTConfig) -> Image {
    let mut rng = SeededRng::new(seed, Stream::Probe);
    let n = config.channels * config.image_size * config.image_size;
    let data = (0..n).map(|_| rng.random::<f64>()).collect();
    Image::new(config.channels, config.image_size, config.image_size, data).expect("sized by config")
}
