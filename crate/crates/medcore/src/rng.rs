//! SplitMix64: the pinned pseudo-random generator for every stochastic
//! piece of this crate (model init, data synthesis, baselines).
//!
//! It is a 64-bit counter-based generator: the state advances by a fixed
//! odd constant and the output is a finalizing hash of the counter, so any
//! language reproduces identical streams from the same seed. Reference
//! constants are the ones published by Sebastiano Vigna (2015).

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Independent substream `index` of a base seed. Used to give every
    /// sample / tensor / block its own deterministic stream.
    pub fn substream(seed: u64, index: u64) -> Self {
        let mut root = SplitMix64::new(seed);
        let a = root.next_u64();
        SplitMix64::new(a ^ mix(index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix(self.state)
    }

    /// Uniform in [0, 1): top 53 bits scaled by 2^-53.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    /// tiny relative to 2^64 so the bias is far below any tolerance used.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    pub fn next_range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Approximate standard normal via the Irwin–Hall sum of 12 uniforms.
    /// Pure arithmetic, so streams are bit-identical on every platform.
    pub fn next_normal(&mut self) -> f64 {
        let mut s = 0.0;
        for _ in 0..12 {
            s += self.next_f64();
        }
        s - 6.0
    }
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
