// Per-channel pattern selection on one supernet layer, cross-checked with
// the explicit objective.

use icdilate::oracle::explicit_argmin;
use icdilate::{edo_layer, LayerSpec, Prng, Tensor4};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = LayerSpec::new("conv", 1, 3, 4, 6);
    let s = spec.supernet_side();
    let mut rng = Prng::new(21);
    let n = spec.c_out * spec.c_in * s * s;
    let weights = Tensor4::new([spec.c_out, spec.c_in, s, s], rng.fill(n, Default::default()))?;

    let a = edo_layer(&weights, &spec)?;
    for (o, (p, err)) in a.patterns.iter().zip(&a.errors).enumerate() {
        let (slow, slow_err, all) = explicit_argmin(&weights.outer_tensor(o), spec.k, spec.d_max, s)?;
        assert_eq!(*p, slow);
        assert!((err - slow_err).abs() <= 1e-9 * slow_err.max(f64::MIN_POSITIVE));
        let worst = all.iter().map(|&(_, e)| e).fold(0.0, f64::max);
        println!("channel {o}: pattern {p} error {err:.6} (worst candidate {worst:.6})");
    }
    println!("{}", a.to_json_compact());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
