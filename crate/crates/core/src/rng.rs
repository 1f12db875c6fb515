//! Portable deterministic random numbers.
//!
//! Every random quantity in the crate comes from [`DetRng`]: a ChaCha20 block
//! cipher keyed by `seed_from_u64(seed)` with an explicit 64-bit stream id.
//! ChaCha20 is counter based, so the `(seed, stream)` pair fully determines the
//! sequence on every platform. Gaussian deviates use the Box-Muller transform
//! evaluated with the pure-Rust `libm` routines, which keeps them bit-identical
//! across targets (the platform libm is not guaranteed to round the same way).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct DetRng {
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

impl DetRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform in (0, 1].
    fn uniform_open_zero(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open_zero();
        let u2 = self.uniform();
        let radius = (-2.0 * libm::log(u1)).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    /// Uniform integer in `0..bound`. `bound` must be positive.
    pub fn below(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound as u64) as usize
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            out.swap(i, j);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = {
            let mut r = DetRng::new(7, 3);
            (0..16).map(|_| r.standard_normal()).collect()
        };
        let b: Vec<f64> = {
            let mut r = DetRng::new(7, 3);
            (0..16).map(|_| r.standard_normal()).collect()
        };
        let c: Vec<f64> = {
            let mut r = DetRng::new(7, 4);
            (0..16).map(|_| r.standard_normal()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        let mut r = DetRng::new(1, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.standard_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn permutation_is_valid() {
        let mut r = DetRng::new(0, 0);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
