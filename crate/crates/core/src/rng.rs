//! Seeded random number generation with a platform-fixed draw sequence.
//!
//! The generator is xoshiro256++ (Blackman & Vigna) with its 256-bit state
//! initialized from a 64-bit seed through SplitMix64, the reference seeding
//! procedure. Both algorithms are pure integer arithmetic, so a given seed
//! produces the identical draw sequence on every platform. The full state is
//! exposed for checkpointing so training runs can resume bitwise.

/// Seeded generator: SplitMix64-initialized xoshiro256++.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    state: [u64; 4],
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    /// Expands `seed` through four SplitMix64 steps into the xoshiro state.
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let state = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        SeededRng { state }
    }

    /// Generator for a worker in a sharded run: `base_seed ^ worker_id`.
    pub fn for_worker(base_seed: u64, worker_id: u64) -> Self {
        SeededRng::new(base_seed ^ worker_id)
    }

    /// Raw state, for checkpoints.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    /// Rebuild from a checkpointed state.
    pub fn from_state(state: [u64; 4]) -> Self {
        SeededRng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1): the top 53 bits of one draw, scaled by 2^-53.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-scale, scale)`.
    pub fn uniform_symmetric(&mut self, scale: f64) -> f64 {
        (self.uniform_f64() * 2.0 - 1.0) * scale
    }

    /// Uniform index in `0..n` via Lemire's widening-multiply rejection
    /// method (unbiased, integer-only).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        let n = n as u64;
        let mut x = self.next_u64();
        let mut m = (x as u128) * (n as u128);
        let mut lo = m as u64;
        if lo < n {
            let threshold = n.wrapping_neg() % n;
            while lo < threshold {
                x = self.next_u64();
                m = (x as u128) * (n as u128);
                lo = m as u64;
            }
        }
        (m >> 64) as usize
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.index(hi - lo + 1)
    }

    /// Bernoulli draw with success probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }
}
