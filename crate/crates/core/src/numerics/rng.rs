//! Counter-based random streams.
//!
//! Every draw in the crate comes from an [`RngStream`] addressed by
//! `(seed, stream-id)`. The generator is ChaCha8 keyed by the seed with the
//! stream id selecting the nonce, so the position inside a stream is a plain
//! word counter and two streams never share output.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Named stream families. Mixed into the stream id so that data, init,
/// reparameterization and sampler draws never overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    Data = 1,
    Init = 2,
    Reparam = 3,
    Sampler = 4,
    Noise = 5,
    Probe = 6,
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Resumes a stream at a saved counter.
    pub fn at(seed: u64, stream: u64, counter: u128) -> Self {
        let mut s = Self::new(seed, stream);
        s.inner.set_word_pos(counter);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Position in 32-bit words from the start of the stream.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn seeded_rng(seed: u64, stream: u64) -> RngStream {
    RngStream::new(seed, stream)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable stream id for a kind plus an index path, e.g. `(Reparam, [step, sample, modality])`.
pub fn stream_id(kind: StreamKind, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(kind as u64), |acc, &p| splitmix(acc ^ splitmix(p)))
}
