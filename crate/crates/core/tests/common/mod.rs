#![allow(dead_code)]

use icdilate::{Prng, Tensor4};

/// Uniform(-1, 1) tensor on the 2⁻²³ grid.
pub fn seeded(dims: [usize; 4], seed: u64) -> Tensor4 {
    let mut r = Prng::new(seed);
    Tensor4::new(dims, r.fill(dims.iter().product(), Default::default())).unwrap()
}

pub fn seeded_from(rng: &mut Prng, dims: [usize; 4]) -> Tensor4 {
    Tensor4::new(dims, rng.fill(dims.iter().product(), Default::default())).unwrap()
}

/// Elementwise `|a - b| <= max(1e-5·|b|, 1e-7)` against an f64 reference.
pub fn assert_close64(got: &Tensor4, want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
        let tol = (1e-5 * w.abs()).max(1e-7);
        assert!((g as f64 - w).abs() <= tol, "{what}: element {i}: {g} vs {w}");
    }
}
