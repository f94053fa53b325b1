use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

/// Deterministic random stream (ChaCha8).
///
/// Sub-streams are derived by name with [`Rng::fork`], so a tensor's initial
/// values depend only on the seed and its name, never on initialization order.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `name`; does not advance `self`.
    pub fn fork(&self, name: &str) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(fnv1a(name.as_bytes()));
        Rng { seed: self.seed, inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// `rows x cols` matrix of independent `N(0, std²)` draws.
pub fn rng_normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    assert!(std >= 0.0, "standard deviation must be nonnegative");
    let data = (0..rows * cols)
        .map(|_| if std == 0.0 { 0.0 } else { std * rng.normal() })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_gives_zeros() {
        assert_eq!(rng_normal(&mut Rng::new(3), 4, 5, 0.0), Matrix::zeros(4, 5));
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = rng_normal(&mut Rng::new(42), 7, 3, 1.0);
        let b = rng_normal(&mut Rng::new(42), 7, 3, 1.0);
        assert_eq!(a, b);
        assert_ne!(a, rng_normal(&mut Rng::new(43), 7, 3, 1.0));
    }

    #[test]
    fn moments_of_ten_thousand_draws() {
        let m = rng_normal(&mut Rng::new(7), 100, 100, 1.0);
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // standard error of the mean is 1/sqrt(n) = 0.01
        assert!(mean.abs() < 5.0 * 0.01, "mean {mean}");
        assert!((0.94..=1.06).contains(&var), "var {var}");
    }

    #[test]
    fn forks_are_order_independent() {
        let root = Rng::new(9);
        let mut a1 = root.fork("a");
        let _ = root.fork("b").normal();
        let mut a2 = root.fork("a");
        assert_eq!(a1.normal(), a2.normal());
        assert_ne!(root.fork("a").normal(), root.fork("b").normal());
    }
}
