// Generate, search, rearrange and verify a three-layer chain.

use icdilate::verify::{verify, VerifyOptions};
use icdilate::{apply, edo_model, generate, Distribution, LayerDecl, LayerSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let layers = vec![
        LayerDecl::new(LayerSpec::new("stem", 1, 3, 3, 16), true),
        LayerDecl::new(
            LayerSpec::new("dw", 1, 3, 16, 16).with_groups(16).with_stride(2, 2),
            true,
        ),
        LayerDecl::new(LayerSpec::new("head", 1, 3, 16, 10), false),
    ];
    let supernet = generate(7, &layers, Distribution::default())?;
    let search = edo_model(&supernet, 3)?;
    let ic = apply(&supernet, &search)?;
    for l in &ic.layers {
        let groups = l.plan.as_ref().map_or(0, |p| p.groups.len());
        println!(
            "{}: {} pattern groups, kernels {:?}",
            l.spec.name,
            groups,
            l.weights.dims()
        );
    }

    for exact in [false, true] {
        let outcome = verify(
            &supernet,
            &ic,
            &VerifyOptions {
                trials: 3,
                exact,
                ..Default::default()
            },
        )?;
        for line in &outcome.passed {
            println!("ok   {line}");
        }
        assert!(outcome.is_ok(), "{:?}", outcome.failure);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
