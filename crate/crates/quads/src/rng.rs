//! Deterministic pseudo-randomness.
//!
//! Every random draw in this crate flows through [`SplitMix64`], a 64-bit
//! counter-based generator: the state advances by a fixed odd constant (a
//! Weyl sequence) and the output is a bijective mix of the counter. The
//! algorithm is pinned here, constant by constant, so that corpora,
//! initializations and k-means restarts are reproducible bit-for-bit on any
//! platform and from any other language implementation:
//!
//! ```text
//! state <- state + 0x9E3779B97F4A7C15          (wrapping, per draw)
//! z <- state
//! z <- (z xor (z >> 30)) * 0xBF58476D1CE4E5B9   (wrapping)
//! z <- (z xor (z >> 27)) * 0x94D049BB133111EB   (wrapping)
//! output <- z xor (z >> 31)
//! ```
//!
//! Floats in `[0, 1)` take the top 53 bits: `(output >> 11) * 2^-53`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Counter-based 64-bit PRNG (SplitMix64).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derives an independent stream from `(seed, stream)`. The stream index
    /// is passed through one mixing round so adjacent indices decorrelate.
    pub fn substream(seed: u64, stream: u64) -> Self {
        Self::new(seed.wrapping_add(mix64(stream ^ GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via the multiply-shift reduction.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box-Muller, cosine branch only so each draw
    /// consumes exactly two uniforms).
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer; a bijection on u64.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
