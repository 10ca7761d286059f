//! Seeded randomness. Every random draw in the pipeline comes from a
//! `ChaCha8Rng` (a counter-based generator) keyed by a seed derived from the
//! run's master seed, so results never depend on execution order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream tags used with [`derive_seed`] to keep independent consumers apart.
pub mod stream {
    pub const GBM_PATH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const WINDOW_STEP: u64 = 6;
    pub const BALANCE: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A source of standard normal variates.
pub trait NormalSource {
    fn next_normal(&mut self) -> f64;
}

/// Marsaglia's polar form of the Box-Muller transform. Each accepted pair of
/// uniforms yields two variates; the second is cached for the next call.
#[derive(Debug, Clone)]
pub struct PolarNormal<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: RngCore> PolarNormal<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }
}

impl PolarNormal<ChaCha8Rng> {
    pub fn from_seed(seed: u64) -> Self {
        Self::new(seeded_rng(seed))
    }
}

impl<R: RngCore> NormalSource for PolarNormal<R> {
    fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.rng.gen::<f64>() - 1.0;
            let v = 2.0 * self.rng.gen::<f64>() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * factor);
                return u * factor;
            }
        }
    }
}

/// Replays a fixed list of variates, cycling when exhausted. Used to inject
/// known shocks into the simulators.
#[derive(Debug, Clone)]
pub struct FixedNormals {
    values: Vec<f64>,
    pos: usize,
}

impl FixedNormals {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "FixedNormals needs at least one value");
        Self { values, pos: 0 }
    }
}

impl NormalSource for FixedNormals {
    fn next_normal(&mut self) -> f64 {
        let z = self.values[self.pos % self.values.len()];
        self.pos += 1;
        z
    }
}
