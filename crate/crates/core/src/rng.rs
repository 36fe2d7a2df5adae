//! Counter-based deterministic random number generation.
//!
//! Every stochastic operation in the toolkit draws from its own `(seed,
//! stream)` pair, so perturbation seeding in one place can never shift the
//! draws consumed somewhere else. The generator applies the splitmix64
//! finalizer to a keyed counter; identical inputs reproduce identical
//! sequences on every platform.

use std::f64::consts::TAU;

/// Stream identifiers; spaced so `stream + epoch` style offsets cannot collide.
pub mod streams {
    pub const INIT: u64 = 0x0001_0000_0000;
    pub const SHUFFLE: u64 = 0x0002_0000_0000;
    pub const BLOBS: u64 = 0x0003_0000_0000;
    pub const NOISE: u64 = 0x0004_0000_0000;
    pub const PERMUTE: u64 = 0x0005_0000_0000;
    pub const WM_PROJECTION: u64 = 0x0006_0000_0000;
    pub const WM_BITS: u64 = 0x0007_0000_0000;
    pub const MONTE_CARLO: u64 = 0x0008_0000_0000;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(state: u64) -> u64 {
    let mut z = state.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            key: mix(mix(seed) ^ mix(stream)),
            counter: 0,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix(self.key.wrapping_add(c.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; pairs are cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        self.spare_normal = Some(r * (TAU * u2).sin());
        r * (TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_reproduces() {
        let mut a = CounterRng::new(42, streams::NOISE);
        let mut b = CounterRng::new(42, streams::NOISE);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_decoupled() {
        let mut a = CounterRng::new(42, streams::NOISE);
        let mut b = CounterRng::new(42, streams::SHUFFLE);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = CounterRng::new(7, streams::MONTE_CARLO);
        let n = 200_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = CounterRng::new(3, streams::SHUFFLE);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
