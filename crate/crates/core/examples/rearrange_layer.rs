// Sorting a layer's channels by pattern and extracting compact kernels.

use icdilate::rearrange::expand_compact;
use icdilate::{build_permutation, extract_compact, Assignment, DilationPattern, LayerSpec, Prng, Tensor4};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let p = DilationPattern::new;
    let a = Assignment {
        layer: "l".into(),
        d_max: 2,
        patterns: vec![p(2, 2), p(1, 1), p(2, 1), p(1, 1)],
        errors: vec![0.0; 4],
    };
    let perm = build_permutation(&a, 1)?;
    println!("perm[new] = old: {:?}", perm.as_slice());
    assert_eq!(perm.as_slice(), &[1, 3, 2, 0]);

    let spec = LayerSpec::new("l", 1, 2, 3, 4);
    let mut rng = Prng::new(2);
    let weights = Tensor4::new([4, 3, 5, 5], rng.fill(300, Default::default()))?;
    let plan = extract_compact(&weights, &a, &spec)?;
    for g in &plan.groups {
        println!("group {} -> channels {}..{}", g.pattern, g.start, g.start + g.count);
    }
    println!("compact kernels {:?}", plan.compact_kernels.dims());

    // Expanding the compact kernels gives back exactly the sampled weights.
    let expanded = expand_compact(&plan.compact_kernels, &plan.channel_patterns(), 1, 2)?;
    for (new, &old) in perm.as_slice().iter().enumerate() {
        for (e, &w) in expanded.outer(new).iter().zip(weights.outer(old)) {
            assert!(*e == 0.0 || *e == w);
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
