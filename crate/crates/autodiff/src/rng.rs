//! Deterministic random streams.
//!
//! The generator is ChaCha8 keyed by a 64-bit seed (`SeedableRng::seed_from_u64`),
//! which produces the same stream on every platform. Uniform `f64` values
//! use the top 53 bits of a `u64`. Gaussian values come from the Box–Muller
//! transform of two uniforms:
//!
//! ```text
//! r  = sqrt(-2 ln u1),  u1 ∈ (0, 1]
//! z0 = r cos(2π u2),    z1 = r sin(2π u2)
//! ```
//!
//! Sub-streams are derived by hashing: the first eight bytes (little endian)
//! of `SHA-256(seed_le ‖ purpose_utf8 ‖ index_le)` become the child seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Child seed for `(seed, purpose)`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    derive_seed_indexed(seed, purpose, None)
}

fn derive_seed_indexed(seed: u64, purpose: &str, index: Option<u64>) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    if let Some(i) = index {
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// One Box–Muller pair from `u1 ∈ (0,1]` and `u2 ∈ [0,1)`.
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Independent stream for a named purpose.
    pub fn derive(seed: u64, purpose: &str) -> Self {
        Self::new(derive_seed(seed, purpose))
    }

    /// Independent stream for a named purpose and index (e.g. sample id).
    pub fn derive_indexed(seed: u64, purpose: &str, index: u64) -> Self {
        Self::new(derive_seed_indexed(seed, purpose, Some(index)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal sample.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let (z0, z1) = box_muller(u1, u2);
        self.spare = Some(z1);
        z0
    }

    /// `Beta(a, b)` sample. `a, b > 0`.
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        Beta::new(a, b).expect("beta parameters must be positive").sample(&mut self.inner)
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(self.uniform_range(lo, hi)))
    }

    pub fn gaussian_tensor<T: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(mean + std * self.gaussian()))
    }

    /// Normal samples redrawn until they fall within two standard deviations.
    pub fn truncated_normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| loop {
            let z = self.gaussian();
            if z.abs() <= 2.0 {
                break T::from_f64_lossy(std * z);
            }
        })
    }
}
