// Grouped dilated execution against the dense zero-embedded reference.

use icdilate::rearrange::expand_compact;
use icdilate::{edo_layer, extract_compact, reference_full, run_inception, LayerSpec, Prng, Tensor4};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = LayerSpec::new("g", 1, 4, 8, 16).with_groups(2).with_stride(2, 2);
    let s = spec.supernet_side();
    let mut rng = Prng::new(9);
    let n = spec.c_out * spec.cin_per_group() * s * s;
    let weights = Tensor4::new(
        [spec.c_out, spec.cin_per_group(), s, s],
        rng.fill(n, Default::default()),
    )?;
    let plan = extract_compact(&weights, &edo_layer(&weights, &spec)?, &spec)?;
    println!("{} groups over {} channels", plan.groups.len(), spec.c_out);

    let x = Tensor4::new([2, 8, 17, 13], rng.fill(2 * 8 * 17 * 13, Default::default()))?;
    let got = run_inception(&x, &plan, &spec)?;
    let full = expand_compact(&plan.compact_kernels, &plan.channel_patterns(), spec.k, spec.d_max)?;
    let want = reference_full(&x, &full, &spec)?;
    println!("output {:?}, identical to reference: {}", got.dims(), got == want);
    assert_eq!(got, want);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
