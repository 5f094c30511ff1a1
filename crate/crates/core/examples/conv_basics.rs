// Dilated and strided convolution on a small seeded input, checked against
// the 64-bit naive oracle.

use icdilate::oracle::{conv2d_naive, Tensor64};
use icdilate::{conv2d, ConvGeometry, Prng, Tensor4};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = Prng::new(5);
    let x = Tensor4::new([1, 2, 10, 10], rng.fill(200, Default::default()))?;
    let w = Tensor4::new([4, 2, 3, 3], rng.fill(72, Default::default()))?;

    for (dilation, stride) in [((1, 1), (1, 1)), ((2, 3), (1, 1)), ((3, 2), (2, 2))] {
        let geom = ConvGeometry::default()
            .with_stride(stride.0, stride.1)
            .with_padding(dilation.0, dilation.1)
            .with_dilation(dilation.0, dilation.1);
        let y = conv2d(&x, &w, &geom)?;
        let want = conv2d_naive(&Tensor64::from(&x), &Tensor64::from(&w), &geom)?;
        let worst = y
            .data()
            .iter()
            .zip(&want.data)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        println!(
            "dilation {dilation:?} stride {stride:?}: output {:?}, max |diff| vs f64 {worst:.2e}",
            y.dims()
        );
        assert!(worst < 1e-5);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
