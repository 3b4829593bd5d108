//! Seeded, splittable randomness.
//!
//! Every random draw in the engine comes from a [`StreamRng`] obtained from a
//! global seed and a named substream:
//!
//! * generator: ChaCha20 (`rand_chacha::ChaCha20Rng`), key = the seed as
//!   8 little-endian bytes followed by 24 zero bytes;
//! * stream id: FNV-1a 64 over the label's UTF-8 bytes, continued over the
//!   index as 8 little-endian bytes;
//! * uniforms: `(next_u64 >> 11) · 2⁻⁵³` in `[0, 1)`;
//! * normals: Box–Muller on a pair `(u1, u2)` with `u1` replaced by `1 − u1`
//!   so the logarithm never sees zero; the cosine branch is returned first and
//!   the sine branch is cached for the next call.
//!
//! The score extractor follows the same recipe to reproduce draws bit-for-bit.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn stream_id(label: &str, index: u64) -> u64 {
    label
        .as_bytes()
        .iter()
        .chain(index.to_le_bytes().iter())
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Root of a family of independent substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, label: &str, index: u64) -> StreamRng {
        StreamRng::new(self.seed, stream_id(label, index))
    }
}

pub struct StreamRng {
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(stream);
        Self {
            inner,
            spare_normal: None,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
