//! Counter-based deterministic random number generation.
//!
//! The generator is a SplitMix64-style counter construction: draw `i` of a
//! stream with key `k` is `mix64(k + i·GAMMA)` where `mix64` is the standard
//! SplitMix64 finalizer. The state is just `(key, counter)`, so streams are
//! bit-identical across platforms for the same call sequence, can be
//! serialized exactly, and sub-streams are cheap to derive.

const GAMMA: u64 = 0x9E2B_7979_3CB3_A7D5;
const STREAM_SALT: u64 = 0x6A09_E667_F3BC_C909;

/// SplitMix64 finalizer.
fn mix64(x: u64) -> u64 {
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix64(seed.wrapping_add(GAMMA)),
            counter: 0,
        }
    }

    /// Derive an independent sub-stream. Distinct `id`s give distinct keys.
    pub fn substream(&self, id: u64) -> Rng {
        Rng {
            key: mix64(self.key ^ mix64(id.wrapping_add(STREAM_SALT))),
            counter: 0,
        }
    }

    /// Raw state for exact checkpointing.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn from_state(key: u64, counter: u64) -> Self {
        Rng { key, counter }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a logarithm argument.
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased-enough index draw via 128-bit widening multiply.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// One standard-normal draw via the Box–Muller transform.
    ///
    /// Consumes exactly two uniforms (the sine branch is discarded), so the
    /// counter offset of every draw is call-sequence determined.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn standard_normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Fisher–Yates shuffle of index order.
    pub fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}
