//! Counter-based pseudo-random numbers.
//!
//! The generator is SplitMix64 viewed as a counter-based construction: the
//! `i`-th output of a stream with key `k` is
//!
//! ```text
//! mix(k + (i + 1) * 0x9E3779B97F4A7C15)
//! mix(z) = z' ^ (z' >> 31)   where
//!     z' = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!     z' = (z' ^ (z' >> 27)) * 0x94D049BB133111EB
//! ```
//!
//! Any output can therefore be computed from `(key, counter)` alone, which is
//! what lets dropout masks be regenerated in the backward pass and lets
//! checkpoint metadata record a stream position as two integers.
//!
//! A run derives three named streams from its single config seed:
//! [`Stream::Init`], [`Stream::Mask`] and [`Stream::Augment`].

use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output number `counter` of stream `key`.
#[inline]
pub fn counter_u64(key: u64, counter: u64) -> u64 {
    mix64(key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// Named sub-streams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Mask,
    Augment,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x696e_6974, // "init"
            Stream::Mask => 0x6d61_736b, // "mask"
            Stream::Augment => 0x6175_676d, // "augm"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix64(seed ^ 0x5EED_0000_0000_0000),
            counter: 0,
        }
    }

    pub fn from_parts(key: u64, counter: u64) -> Self {
        Rng { key, counter }
    }

    pub fn stream(seed: u64, stream: Stream) -> Self {
        Rng::new(seed).split(stream.tag())
    }

    /// Independent child stream; does not advance `self`.
    pub fn split(&self, label: u64) -> Rng {
        Rng {
            key: mix64(self.key ^ mix64(label.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = counter_u64(self.key, self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Unbiased integer in `[0, bound)` (Lemire's multiply-and-reject).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        self.next_f32() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }

    /// Normal with the given std, resampled until within two std of zero.
    pub fn trunc_normal(&mut self, std: f32) -> f32 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Deterministic uniformly random permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut perm);
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // SplitMix64 seeded with 0 (state advanced before mixing).
        assert_eq!(counter_u64(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(counter_u64(0, 1), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn permutation_basics() {
        assert_eq!(seeded_permutation(0, 3), Vec::<usize>::new());
        assert_eq!(seeded_permutation(1, 3), vec![0]);
        assert_eq!(seeded_permutation(50, 9), seeded_permutation(50, 9));
        let mut p = seeded_permutation(100, 1);
        p.sort();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = Rng::stream(1, Stream::Init);
        let mut b = Rng::stream(1, Stream::Mask);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Rng::new(4);
        for bound in 1..50u64 {
            for _ in 0..20 {
                assert!(r.below(bound) < bound);
            }
        }
    }

    #[test]
    fn first_element_is_uniform_chi_square() {
        // n = 10^4, one draw per seed over 10^4 seeds. Bucket the element at
        // index 0 into 20 equal bins and test uniformity.
        let n = 10_000usize;
        let bins = 20usize;
        let mut counts = vec![0usize; bins];
        for seed in 0..10_000u64 {
            let p = seeded_permutation(n, seed);
            counts[p[0] * bins / n] += 1;
        }
        let expected = 10_000.0 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 19 dof: P(chi2 > 36.19) = 0.01.
        assert!(chi2 < 36.19, "chi2 = {chi2}, counts = {counts:?}");
    }
}
