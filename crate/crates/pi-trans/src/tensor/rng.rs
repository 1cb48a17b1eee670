//! Counter-based deterministic PRNG.
//!
//! Streams are keyed by `(seed, label)`. The i-th output of a stream is
//! `mix64(key + i * GAMMA)` where `mix64` is the SplitMix64 finalizer, so a
//! stream is a pure function of its key and position: identical `(seed,
//! label)` pairs produce bit-identical sequences on every platform, and
//! state can be captured/restored by storing the counter alone.

/// Weyl increment of SplitMix64.
const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes, used to fold a purpose label into the key.
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// One deterministic random stream.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    /// Opens the stream for `(seed, label)` at position 0.
    pub fn new(seed: u64, label: &str) -> Rng {
        Rng {
            key: mix64(seed ^ hash_label(label)),
            counter: 0,
        }
    }

    /// Rebuilds a stream from a captured `(key, counter)` pair.
    pub fn from_state(key: u64, counter: u64) -> Rng {
        Rng { key, counter }
    }

    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)));
        self.counter += 1;
        out
    }

    /// Uniform f32 in [0, 1), 24 bits of mantissa.
    pub fn uniform(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform f32 in [lo, hi).
    pub fn range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Approximate standard normal via the Irwin-Hall 12-sum. Uses only
    /// IEEE additions of exact dyadic uniforms, so values are bit-identical
    /// across platforms (no transcendental libm calls).
    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        let mut acc = 0.0f32;
        for _ in 0..12 {
            acc += self.uniform();
        }
        mean + std * (acc - 6.0)
    }

    /// Fills a buffer with normal draws.
    pub fn fill_normal(&mut self, out: &mut [f32], mean: f32, std: f32) {
        for v in out.iter_mut() {
            *v = self.normal(mean, std);
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
