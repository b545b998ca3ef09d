//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(seed, domain, index)`. Streams are stateless to derive, so a resumed run
//! reproduces the draws of an uninterrupted one without carrying generator
//! state around.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn stream(seed: u64, domain: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(domain.as_bytes()));
    rng.set_stream(index);
    rng
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard normal tensor. Samples are drawn in f64 and cast, so f32 and f64
/// models see the same noise up to rounding.
pub fn normal_tensor(rng: &mut Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = normal_vec(rng, n);
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
