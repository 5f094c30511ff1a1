//! Seeded value streams for synthetic weights and test inputs.
//!
//! The generator is SplitMix64 (state += 0x9E3779B97F4A7C15, then the
//! standard mix), seeded directly with the user seed. Real values are derived
//! as follows:
//!
//! * `uniform(a)`: `u = (x >> 40) · 2⁻²⁴`, value `a · (2u − 1)` rounded to
//!   `f32`. With `a` a power of two every value lies on a `2⁻²³·a` grid.
//! * `gaussian(σ)`: Box–Muller cosine branch from two draws,
//!   `u1 = ((x₁ >> 11) + 1) · 2⁻⁵³`, `u2 = (x₂ >> 11) · 2⁻⁵³`,
//!   value `σ · √(−2 ln u1) · cos(2π u2)` rounded to `f32`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

/// Distribution used for generated weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    /// Uniform on `[-a, a)`.
    Uniform { a: f64 },
    /// Zero-mean normal with standard deviation `sigma`.
    Gaussian { sigma: f64 },
}

impl Default for Distribution {
    fn default() -> Self {
        Distribution::Uniform { a: 1.0 }
    }
}

pub struct Prng {
    inner: SplitMix64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 24 bits of resolution.
    pub fn unit24(&mut self) -> f64 {
        (self.next_u64() >> 40) as f64 * (1.0 / (1u64 << 24) as f64)
    }

    pub fn uniform(&mut self, a: f64) -> f32 {
        (a * (2.0 * self.unit24() - 1.0)) as f32
    }

    pub fn gaussian(&mut self, sigma: f64) -> f32 {
        let scale = 1.0 / (1u64 << 53) as f64;
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * scale;
        let u2 = (self.next_u64() >> 11) as f64 * scale;
        (sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    pub fn sample(&mut self, dist: Distribution) -> f32 {
        match dist {
            Distribution::Uniform { a } => self.uniform(a),
            Distribution::Gaussian { sigma } => self.gaussian(sigma),
        }
    }

    /// Integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn fill(&mut self, len: usize, dist: Distribution) -> Vec<f32> {
        (0..len).map(|_| self.sample(dist)).collect()
    }
}
