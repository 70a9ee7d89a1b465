//! Deterministic random number generation.
//!
//! Every stochastic operation in the toolkit draws from [`Rng`], a thin
//! wrapper over the ChaCha8 stream cipher. The generator is fully specified
//! by a 64-bit seed plus a 64-bit stream id, so identical seeds produce
//! identical draws on every platform. Runs record their seed in the output
//! manifest, which is what makes re-runs byte-identical.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic generator (ChaCha8, seeded, stream-addressable).
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Seed this generator was created from (forks keep the parent's seed).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream. Forking with distinct ids yields
    /// non-overlapping streams regardless of how much the parent has been
    /// consumed, which keeps per-cloud work order-independent.
    pub fn fork(&self, stream: u64) -> Self {
        let mut child = ChaCha8Rng::seed_from_u64(self.seed);
        child.set_stream(stream.wrapping_add(1));
        Rng {
            inner: child,
            seed: self.seed,
        }
    }

    /// Uniform draw from [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw from [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Gumbel(0, 1) draw: -ln(-ln u) with u uniform in (0, 1).
    pub fn gumbel(&mut self) -> f64 {
        let u = self.open_uniform();
        -(-u.ln()).ln()
    }

    /// Logistic(0, 1) draw: ln(u / (1 - u)), the difference of two Gumbels.
    pub fn logistic(&mut self) -> f64 {
        let u = self.open_uniform();
        (u / (1.0 - u)).ln()
    }

    /// Integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is empty");
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    // Uniform on the open interval (0, 1); keeps ln() finite.
    fn open_uniform(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 && u < 1.0 {
                return u;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn forks_are_independent_of_parent_state() {
        let mut a = Rng::new(7);
        let b = Rng::new(7);
        for _ in 0..10 {
            a.uniform();
        }
        let mut fa = a.fork(3);
        let mut fb = b.fork(3);
        for _ in 0..20 {
            assert_eq!(fa.uniform().to_bits(), fb.uniform().to_bits());
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(1);
        let mut xs: Vec<usize> = (0..57).collect();
        rng.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn gumbel_mean_is_euler_gamma() {
        let mut rng = Rng::new(9);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| rng.gumbel()).sum::<f64>() / n as f64;
        // Euler-Mascheroni constant, sigma of Gumbel(0,1) is pi/sqrt(6).
        assert!((mean - 0.5772).abs() < 0.01, "mean {mean}");
    }
}
