//! Counter-based random streams.
//!
//! Every draw in the crate comes from a [`KeyedRng`]: a ChaCha8 stream seeded by
//! a 64-bit key derived from a tuple of identifiers (seed, replicate, subject,
//! stream). Each stream is a pure function of its identifiers, so results never
//! depend on the order in which replicates or subjects are processed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of identifiers into a single stream key.
pub fn derive_key(parts: &[u64]) -> u64 {
    let mut h = 0x6a09_e667_f3bc_c909u64;
    for (pos, &part) in parts.iter().enumerate() {
        h = mix64(h ^ mix64(part.wrapping_add((pos as u64 + 1).wrapping_mul(GOLDEN))));
    }
    h
}

/// Named sub-streams used by the generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Partition = 1,
    Structure = 2,
    Design = 3,
    RandomEffect = 4,
    Noise = 5,
    Perturbation = 6,
    Series = 7,
}

#[derive(Debug, Clone)]
pub struct KeyedRng(ChaCha8Rng);

impl KeyedRng {
    pub fn new(key: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(key))
    }

    pub fn from_parts(parts: &[u64]) -> Self {
        Self::new(derive_key(parts))
    }

    /// Stream for `(seed, replicate, subject, stream)`.
    pub fn for_subject(seed: u64, rep: u64, subject: u64, stream: Stream) -> Self {
        Self::from_parts(&[seed, rep, subject, stream as u64])
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.0.random()
    }
}

impl RngCore for KeyedRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
}
