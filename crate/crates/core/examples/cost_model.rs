// MAC counts for standard, inception, supernet and per-dilation branch forms.

use icdilate::{cost_model, LayerSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    for d_max in 1..=4 {
        let spec = LayerSpec::new("c", 1, d_max, 64, 64);
        let r = cost_model(&spec, 56, 56)?;
        println!(
            "d_max {d_max}: standard {} inception {} supernet {} branches {} ratio {}",
            r.macs_standard, r.macs_inception, r.macs_supernet, r.macs_darts_style, r.ratio_edo_over_darts
        );
        assert_eq!(r.macs_inception, r.macs_standard);
    }
    assert_eq!(
        cost_model(&LayerSpec::new("c", 1, 4, 64, 64), 56, 56)?.ratio_edo_over_darts,
        0.5625
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
