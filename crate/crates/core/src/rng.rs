//! Deterministic randomness.
//!
//! Every randomized component in the crate draws from [`Rng`], a
//! xoshiro256** generator whose 256-bit state is derived from a root seed
//! and a list of integer stream labels with SplitMix64 mixing. The
//! derivation and all distribution samplers below are fixed algorithms, so
//! the same `(seed, labels)` pair produces the same stream on every
//! platform and in any reimplementation that follows the same recipe.
//!
//! Derivation:
//!
//! ```text
//! key = splitmix64(root)                      (one step of the SplitMix64 sequence)
//! for label in labels: key = mix(key ^ mix(label + GOLDEN))
//! state[0..4] = first four outputs of SplitMix64 seeded with key
//! ```

use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use thiserror::Error;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Well-known stream labels. Callers append their own labels after these.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const DATA: u64 = 4;
    pub const TEST_DATA: u64 = 5;
    pub const PARTITION: u64 = 6;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RngError {
    #[error("invalid distribution parameter: {0}")]
    BadParam(String),
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SplitMix64(u64);

impl SplitMix64 {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(GOLDEN);
        mix(self.0)
    }
}

/// Seeded xoshiro256** stream.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

impl Rng {
    /// Derives an independent stream from `root_seed` and `labels`,
    /// e.g. `[stream::TRAIN, client_id, round]`.
    pub fn seed_from(root_seed: u64, labels: &[u64]) -> Self {
        let mut key = SplitMix64(root_seed).next();
        for &label in labels {
            key = mix(key ^ mix(label.wrapping_add(GOLDEN)));
        }
        let mut sm = SplitMix64(key);
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&sm.next().to_le_bytes());
        }
        Self {
            inner: Xoshiro256StarStar::from_seed(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in `[0, n)` (Lemire's multiply-and-reject).
    ///
    /// Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Standard normal via Box-Muller, cosine branch only (two uniforms per draw).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang. Shapes below one use the
    /// `Gamma(shape + 1) * U^(1/shape)` boost.
    pub fn gamma(&mut self, shape: f64) -> Result<f64, RngError> {
        if !(shape.is_finite() && shape > 0.0) {
            return Err(RngError::BadParam(format!("gamma shape {shape}")));
        }
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0)?;
            let u = 1.0 - self.uniform();
            return Ok(g * u.powf(1.0 / shape));
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let (x, v) = loop {
                let x = self.normal();
                let v = 1.0 + c * x;
                if v > 0.0 {
                    break (x, v * v * v);
                }
            };
            let u = 1.0 - self.uniform();
            if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return Ok(d * v);
            }
        }
    }

    /// Symmetric Dirichlet draw of dimension `k` from normalized gamma variates.
    pub fn dirichlet(&mut self, beta: f64, k: usize) -> Result<Vec<f64>, RngError> {
        if k == 0 {
            return Err(RngError::BadParam("dirichlet dimension 0".into()));
        }
        loop {
            let draws = (0..k)
                .map(|_| self.gamma(beta))
                .collect::<Result<Vec<_>, _>>()?;
            let total: f64 = draws.iter().sum();
            // All components can underflow to zero for tiny beta; redraw.
            if total > 0.0 && total.is_finite() {
                return Ok(draws.into_iter().map(|g| g / total).collect());
            }
        }
    }

    /// In-place Fisher-Yates shuffle, swapping from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `m` distinct values from `0..n`, in ascending order (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, m: usize) -> Vec<usize> {
        assert!(m <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(m);
        pool.sort_unstable();
        pool
    }
}
