//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a
//! `(seed, stream)` pair, so no generator state is shared between datasets,
//! initializers, timestep draws and samplers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream identifiers. Distinct consumers must never share one.
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const TIMESTEP: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const INIT_VELOCITY: u64 = 5;
    pub const INIT_SCHEDULE_A: u64 = 6;
    pub const INIT_SCHEDULE_B: u64 = 7;
    pub const TRAIN_NOISE: u64 = 8;
    pub const PROJECTIONS: u64 = 9;
    pub const SUBSAMPLE: u64 = 10;
    pub const PAIRS: u64 = 11;
}

/// A ChaCha8 generator keyed by `seed` on the given stream.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in the open interval (0, 1) with 53 bits of resolution.
pub fn uniform_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let bits = rng.gen::<u64>() >> 11;
        if bits != 0 {
            return bits as f64 * (1.0 / (1u64 << 53) as f64);
        }
    }
}

/// Standard normal draws by the Box-Muller transform.
///
/// Draws come in pairs; the second value of each pair is cached so the
/// sequence depends only on the underlying stream.
pub struct NormalSampler<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> NormalSampler<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = uniform_open(&mut self.rng);
        let u2 = uniform_open(&mut self.rng);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}
