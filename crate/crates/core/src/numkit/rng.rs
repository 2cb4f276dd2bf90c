use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::Xoshiro256PlusPlus;

const OPEN_LO: f64 = 1.0 / (1u64 << 53) as f64;
const OPEN_HI: f64 = 1.0 - OPEN_LO;

/// A reproducible random stream addressed by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector is part of the cipher
/// nonce: streams with distinct ids share the key but never share a
/// keystream block, and the output depends only on `(seed, stream_id,
/// position)`, not on the host platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// A stream keyed by `seed` whose id is derived from `path`.
    pub fn keyed(seed: u64, path: &[u64]) -> Self {
        Self::new(seed, derive_stream_id(path))
    }

    /// A fresh sub-stream with the same seed, addressed by `path` under this
    /// stream's id. Independent of how much has been drawn from `self`.
    pub fn substream(&self, path: &[u64]) -> Self {
        let mut full = Vec::with_capacity(path.len() + 1);
        full.push(self.stream_id);
        full.extend_from_slice(path);
        Self::new(self.seed, derive_stream_id(&full))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Uniform draw strictly inside `(0, 1)`.
    #[inline]
    pub fn uniform01(&mut self) -> f64 {
        let u = (self.inner.next_u64() >> 11) as f64 * OPEN_LO;
        u.clamp(OPEN_LO, OPEN_HI)
    }

    /// A fast generator seeded from the next 256 bits of this stream, for
    /// bulk draws inside one Monte-Carlo sample.
    pub fn fast(&mut self) -> FastStream {
        let mut seed = [0u8; 32];
        self.inner.fill_bytes(&mut seed);
        FastStream(Xoshiro256PlusPlus::from_seed(seed))
    }

    /// Uniform index in `0..n` (Lemire's multiply-shift; bias below 2^-32 for
    /// the sizes used here).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

impl RngCore for RngStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Xoshiro256++ generator derived from an [`RngStream`]; used where tens of
/// thousands of uniforms are drawn per sample.
#[derive(Clone, Debug)]
pub struct FastStream(Xoshiro256PlusPlus);

impl FastStream {
    /// Uniform draw strictly inside `(0, 1)`.
    #[inline]
    pub fn uniform01(&mut self) -> f64 {
        let u = (self.0.next_u64() >> 11) as f64 * OPEN_LO;
        u.clamp(OPEN_LO, OPEN_HI)
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of integers into a single 64-bit stream id.
pub fn derive_stream_id(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}
