//! Seeded, counter-based random number generation.
//!
//! The generator is SplitMix64: the internal state is `seed + n * GAMMA`
//! after `n` draws, and each output is a fixed bijective mix of that state.
//! Two instances with the same seed therefore produce identical streams, and
//! independent streams for parallel work are derived with [`SeededRng::derive`]
//! rather than by sharing one instance.

use crate::numerics::DataMatrix;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream owned by a single caller.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed }
    }

    /// Documented split function: `derive(seed, stream)` yields an
    /// independent generator that depends only on `(seed, stream)`, never on
    /// how far the parent stream has advanced. Used to hand each parallel
    /// unit (sample, round, iteration) its own reproducible stream.
    pub fn derive(seed: u64, stream: u64) -> Self {
        SeededRng::new(mix(seed ^ mix(stream.wrapping_add(GAMMA))))
    }

    /// Two-level split for nested loops, e.g. `(seed, iteration, sample)`.
    pub fn derive2(seed: u64, a: u64, b: u64) -> Self {
        let first = mix(seed ^ mix(a.wrapping_add(GAMMA)));
        SeededRng::derive(first, b)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on two uniform draws.
    pub fn normal(&mut self) -> f64 {
        // 1 - U keeps the argument of ln strictly positive.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> DataMatrix {
        let mut m = DataMatrix::zeros(rows, cols);
        self.fill_normal(m.values_mut());
        m
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)` via multiply-shift (no rejection loop, so
    /// the stream consumption per call is fixed).
    pub fn index_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Categorical draw by inverse CDF over (not necessarily normalized)
    /// non-negative weights. Falls back to the last positive-weight index
    /// when rounding pushes the cursor past the total.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        debug_assert!(!weights.is_empty());
        let total: f64 = weights.iter().sum();
        categorical_from_uniform(weights, total, self.uniform())
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Inverse-CDF lookup shared by [`SeededRng::categorical`] and the coupled
/// latent sampler, which reuses one uniform draw across several weight
/// vectors.
pub fn categorical_from_uniform(weights: &[f64], total: f64, u: f64) -> usize {
    let mut cursor = u * total;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        cursor -= w;
        if cursor < 0.0 {
            return i;
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_produce_identical_streams() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge_within_100_draws() {
        let mut a = SeededRng::new(1);
        let mut b = SeededRng::new(2);
        let diverged = (0..100).any(|_| a.next_u64() != b.next_u64());
        assert!(diverged);
    }

    #[test]
    fn derived_streams_are_independent_of_parent_position() {
        let d1 = SeededRng::derive(7, 3).next_u64();
        let mut parent = SeededRng::new(7);
        parent.next_u64();
        parent.next_u64();
        let d2 = SeededRng::derive(7, 3).next_u64();
        assert_eq!(d1, d2);
        assert_ne!(
            SeededRng::derive(7, 3).next_u64(),
            SeededRng::derive(7, 4).next_u64()
        );
    }

    #[test]
    fn normal_moments_over_1e5_draws() {
        let mut rng = SeededRng::new(2024);
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
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut rng = SeededRng::new(9);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn categorical_respects_point_masses() {
        let mut rng = SeededRng::new(31);
        for _ in 0..100 {
            assert_eq!(rng.categorical(&[0.0, 1.0, 0.0]), 1);
        }
        // Roughly balanced for a fair coin.
        let mut ones = 0;
        for _ in 0..10_000 {
            ones += rng.categorical(&[0.5, 0.5]);
        }
        assert!((3_500..6_500).contains(&ones), "ones {ones}");
    }

    #[test]
    fn index_below_covers_range() {
        let mut rng = SeededRng::new(77);
        let mut seen = [false; 5];
        for _ in 0..1_000 {
            seen[rng.index_below(5)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
