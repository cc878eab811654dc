//! Deterministic randomness used everywhere randomness matters for reproducibility.
//!
//! Two consumers with slightly different needs share this module:
//!
//! * the corpus sampler, which needs a seedable stream whose output is identical
//!   on every platform and reimplementable from a one-line description, and
//! * the simulator, which needs *counter-based* randomness keyed by
//!   (world seed, replication, question, condition, router) so that any single
//!   trial's draws can be reproduced without replaying the whole run, and so
//!   that runs differing only in contamination strength share draws exactly
//!   (common random numbers).
//!
//! Everything below is plain 64-bit integer arithmetic: no platform-dependent
//! floating point, no OS entropy, no endianness traps.

/// The splitmix64 output mixer: add the golden-ratio increment externally,
/// then finalize with this avalanche function.
#[inline]
pub fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Sequential splitmix64 generator. `next_u64` is exactly
/// `state += GOLDEN; return mix(state)`.
#[derive(Debug, Clone)]
pub struct DetRng {
    state: u64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng { state: seed }
    }

    /// Derive a generator from a tuple of key components. Each component is
    /// folded through the mixer so that nearby keys (adjacent router indices,
    /// consecutive questions) produce unrelated streams.
    pub fn from_key(parts: &[u64]) -> Self {
        let mut state = splitmix64_mix(GOLDEN);
        for &p in parts {
            state = splitmix64_mix(state ^ splitmix64_mix(p.wrapping_add(GOLDEN)));
        }
        DetRng { state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        splitmix64_mix(self.state)
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound). Reduction is a plain modulo, accepted
    /// bias is ~bound/2^64 and irrelevant at the set sizes used here; the
    /// modulo form is kept because it is trivially portable.
    #[inline]
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        self.next_u64() % bound
    }

    /// Bernoulli draw.
    #[inline]
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Poisson draw by Knuth's product method; fine for the small means
    /// (noise-atom counts) used here.
    pub fn poisson(&mut self, mean: f64) -> u32 {
        if mean <= 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0u32;
        let mut p = 1.0f64;
        loop {
            p *= self.next_f64();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }
}

/// FNV-1a over UTF-8 bytes, for folding string identifiers into rng keys.
pub fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
