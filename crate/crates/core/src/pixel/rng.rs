//! Seeded random streams.
//!
//! Every random draw in the pipeline comes from an [`RngStream`] derived from
//! a root seed and a 64-bit stream label. The construction is fixed so that a
//! corpus can be regenerated bit-for-bit on any platform:
//!
//! 1. `x = root_seed ^ stream_id`
//! 2. two SplitMix64 outputs seeded at `x` become the PCG32 `initstate` and
//!    `initseq`
//! 3. PCG32 (XSH-RR, 64-bit LCG) seeded with the reference `srandom` routine.

use serde::{Deserialize, Serialize};

const PCG_MULT: u64 = 6_364_136_223_846_793_005;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function applied to an already-advanced state.
#[inline]
pub fn splitmix64_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Plain SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        splitmix64_finalize(self.state)
    }
}

/// Combine several labels into one stream id.
///
/// Used to give every (purpose, patch, epoch, slot) tuple its own stream.
pub fn stream_id(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3_u64;
    for &p in parts {
        h = splitmix64_finalize(h.wrapping_add(GOLDEN) ^ p);
    }
    h
}

/// A PCG32 stream owned by exactly one consumer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    state: u64,
    inc: u64,
    stream_id: u64,
    #[serde(default)]
    spare_normal: Option<u64>,
}

impl RngStream {
    /// Derive the stream labelled `stream_id` under `root_seed`.
    pub fn derive(root_seed: u64, stream_id: u64) -> Self {
        let mut sm = SplitMix64::new(root_seed ^ stream_id);
        let init_state = sm.next_u64();
        let init_seq = sm.next_u64();
        let mut rng = RngStream {
            state: 0,
            inc: (init_seq << 1) | 1,
            stream_id,
            spare_normal: None,
        };
        rng.step();
        rng.state = rng.state.wrapping_add(init_state);
        rng.step();
        rng
    }

    /// Derive a child stream; the child is a pure function of this stream's
    /// label and `parts`, not of how many draws have been taken.
    pub fn child(&self, root_seed: u64, parts: &[u64]) -> Self {
        let mut all = Vec::with_capacity(parts.len() + 1);
        all.push(self.stream_id);
        all.extend_from_slice(parts);
        RngStream::derive(root_seed, stream_id(&all))
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    fn step(&mut self) {
        self.state = self.state.wrapping_mul(PCG_MULT).wrapping_add(self.inc);
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.step();
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased integer in `[0, n)`. `n` must be nonzero and fit in 32 bits.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0 && n <= u32::MAX as usize, "below() range out of bounds");
        let n = n as u32;
        // Lemire's multiply-shift with rejection.
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = self.next_u32() as u64 * n as u64;
            if (m as u32) >= threshold {
                return (m >> 32) as usize;
            }
        }
    }

    /// Bernoulli draw.
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal deviate by the Box–Muller transform.
    pub fn normal(&mut self) -> f64 {
        if let Some(bits) = self.spare_normal.take() {
            return f64::from_bits(bits);
        }
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some((r * theta.sin()).to_bits());
        r * theta.cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n` (partial Fisher–Yates), in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
