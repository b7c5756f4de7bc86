//! Seeded random streams.
//!
//! Every source of randomness in a run derives from one `u64` seed through
//! named sub-streams ("env", "policy-sample", "shuffle", "eval", ...), so
//! changing how one consumer draws never perturbs the others. Streams are
//! `Clone`: an environment can carry its stream position inside its state.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng as _, SeedableRng};

/// SplitMix64 step, used only to expand seeds into key material.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a over the label bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A deterministic ChaCha8-backed stream of random values.
#[derive(Debug, Clone)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    /// Stream derived directly from a seed.
    pub fn new(seed: u64) -> Self {
        Self::from_material(seed, 0)
    }

    /// Stream derived from a seed and a sub-stream label.
    pub fn named(seed: u64, label: &str) -> Self {
        Self::from_material(seed, label_hash(label))
    }

    fn from_material(seed: u64, salt: u64) -> Self {
        let mut state = seed ^ salt.rotate_left(17);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        RngStream(ChaCha8Rng::from_seed(key))
    }

    /// Child stream; advances this stream by one draw.
    pub fn derive(&mut self, label: &str) -> RngStream {
        let seed = self.next_u64();
        RngStream::named(seed, label)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box-Muller; the sine mate is discarded).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased integer draw in `[0, n)` by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

/// The minibatch visit order for one epoch: a pure function of
/// `(shuffle_seed, epoch)`, so re-running an update with the same seed on a
/// copied incumbent reproduces it exactly.
pub fn minibatch_permutation(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = RngStream::from_material(shuffle_seed, (epoch as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic() {
        let mut a = RngStream::named(7, "env");
        let mut b = RngStream::named(7, "env");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn labels_separate_streams() {
        let mut a = RngStream::named(7, "env");
        let mut b = RngStream::named(7, "eval");
        let same = (0..32).filter(|_| a.next_u64() == b.next_u64()).count();
        assert!(same < 4);
    }

    #[test]
    fn normal_moments() {
        let mut rng = RngStream::named(0, "normal");
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn permutation_is_pure_in_seed_and_epoch() {
        let a = minibatch_permutation(128, 3, 2);
        let b = minibatch_permutation(128, 3, 2);
        assert_eq!(a, b);
        assert_ne!(minibatch_permutation(128, 3, 3), a);
        assert_ne!(minibatch_permutation(128, 4, 2), a);

        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..128).collect::<Vec<_>>());
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = RngStream::new(1);
        for n in [1u64, 2, 3, 17, 1000] {
            for _ in 0..50 {
                assert!(rng.below(n) < n);
            }
        }
    }
}
