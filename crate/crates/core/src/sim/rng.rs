use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hash::{sha256, Digest256};

/// Preimage tag of the genesis hash: `sha256("psap-genesis" || seed_be)`.
pub const GENESIS_TAG: &[u8] = b"psap-genesis";
const BLOCK_TAG: &[u8] = b"psap-block";

pub fn genesis_hash(seed: u64) -> Digest256 {
    sha256(&[GENESIS_TAG, &seed.to_be_bytes()])
}

/// `sha256("psap-block" || height_be || prev || content)`.
pub fn block_hash(height: u64, prev: &Digest256, content: &[u8]) -> Digest256 {
    sha256(&[BLOCK_TAG, &height.to_be_bytes(), prev.as_bytes(), content])
}

/// Random stream keyed by the previous block hash, the height and a purpose
/// label: `seed = sha256(H_b || t || purpose) mod 2^32`, expanded by ChaCha8.
#[derive(Clone, Debug)]
pub struct DeterministicRng {
    seed: u32,
    inner: ChaCha8Rng,
}

impl DeterministicRng {
    pub fn new(prev: &Digest256, height: u64, purpose: &str) -> Self {
        let seed = Self::seed_of(prev, height, purpose);
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed as u64) }
    }

    pub fn seed_of(prev: &Digest256, height: u64, purpose: &str) -> u32 {
        sha256(&[prev.as_bytes(), &height.to_be_bytes(), purpose.as_bytes()]).low_u32()
    }

    pub fn seed(&self) -> u32 {
        self.seed
    }
}

impl RngCore for DeterministicRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
