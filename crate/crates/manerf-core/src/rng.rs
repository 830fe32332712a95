//! Seeded random streams.
//!
//! Every stochastic choice in the pipeline draws from a ChaCha8 stream derived
//! from `(base_seed, purpose, index)`. Streams are independent of each other
//! and of how many draws earlier streams consumed, so e.g. resuming training
//! at step `k` replays exactly the draws an uninterrupted run would make.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fmath;

/// Labels for the independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization; index = parameter ordinal.
    Init,
    /// Per-training-step draws (frame, pixels, depth jitter, probes); index = step.
    TrainStep,
    /// Dataset generation; index = frame index (or u64::MAX for scene-level draws).
    DatasetFrame,
    /// Head model generation.
    HeadModel,
    /// Free-form evaluation / rendering draws.
    Render,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x494e4954,
            Stream::TrainStep => 0x53544550,
            Stream::DatasetFrame => 0x46524d45,
            Stream::HeadModel => 0x48454144,
            Stream::Render => 0x524e4452,
        }
    }
}

/// splitmix64 finalizer; decorrelates nearby (seed, tag, index) triples.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic ChaCha8 stream for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let a = mix(seed ^ stream.tag());
    let b = mix(a ^ index);
    let c = mix(b);
    let d = mix(c);
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in `[0, 1)`.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>()
}

/// Standard normal via Box-Muller (two uniforms per call, one value returned;
/// the twin is discarded to keep the draw count per call fixed).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2 = rng.gen::<f64>();
    fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
}

/// Uniform integer in `[0, n)`.
pub fn index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    rng.gen_range(0..n)
}
