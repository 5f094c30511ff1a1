//! Inception convolution execution, the full-kernel reference, MAC
//! accounting and a small timing harness.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::container::{Affine, ModelContainer, ModelKind};
use crate::error::{dim_err, geom_err, Result};
use crate::prng::Prng;
use crate::rearrange::{ChannelPermutation, GroupedPlan};
use crate::search::LayerSpec;
use crate::tensor::{check_conv_shapes, conv2d, conv_plane, ConvGeometry, Tensor4};

/// Geometry of a standard `(2k+1)²` convolution with "same" padding `k`.
pub fn standard_geometry(spec: &LayerSpec) -> ConvGeometry {
    ConvGeometry::default()
        .with_stride(spec.stride[0], spec.stride[1])
        .with_padding(spec.k, spec.k)
        .with_groups(spec.groups)
}

/// Geometry of the supernet convolution: side `2·k·d_max+1`, padding `k·d_max`.
pub fn supernet_geometry(spec: &LayerSpec) -> ConvGeometry {
    let pad = spec.k * spec.d_max;
    ConvGeometry::default()
        .with_stride(spec.stride[0], spec.stride[1])
        .with_padding(pad, pad)
        .with_groups(spec.groups)
}

fn check_input(input: &Tensor4, spec: &LayerSpec) -> Result<()> {
    if input.dims()[1] != spec.c_in {
        return Err(dim_err(format!(
            "layer `{}` expects {} input channels, got {}",
            spec.name,
            spec.c_in,
            input.dims()[1]
        )));
    }
    Ok(())
}

/// Runs one dilated sub-convolution per pattern group.
///
/// Group `(p, start, count)` fills output channels `start..start+count` using
/// dilation `(p.dy, p.dx)` and padding `(k·p.dy, k·p.dx)`, so every group has
/// the spatial dims of the standard convolution.
pub fn run_inception(input: &Tensor4, plan: &GroupedPlan, spec: &LayerSpec) -> Result<Tensor4> {
    spec.validate()?;
    plan.check_against(spec)?;
    check_input(input, spec)?;
    let kernels = &plan.compact_kernels;
    let (ho, wo) = check_conv_shapes(input, kernels, &standard_geometry(spec))?;
    let side = spec.compact_side();
    let (cin_g, cout_g) = (spec.cin_per_group(), spec.cout_per_group());

    let mut per_channel = Vec::with_capacity(spec.c_out);
    for g in &plan.groups {
        let (dy, dx) = (g.pattern.dy, g.pattern.dx);
        let geom = ConvGeometry::default()
            .with_stride(spec.stride[0], spec.stride[1])
            .with_padding(spec.k * dy, spec.k * dx)
            .with_dilation(dy, dx);
        let dims = geom.output_dims(input.dims()[2], input.dims()[3], side, side)?;
        if dims != (ho, wo) {
            return Err(geom_err(format!(
                "layer `{}`: group {} produces {:?}, expected {:?}",
                spec.name,
                g.pattern,
                dims,
                (ho, wo)
            )));
        }
        per_channel.extend(std::iter::repeat_n(geom, g.count));
    }

    let n = input.dims()[0];
    let c_out = spec.c_out;
    let mut out = vec![0.0f32; n * c_out * ho * wo];
    if !out.is_empty() {
        out.par_chunks_mut(ho * wo).enumerate().for_each(|(idx, plane)| {
            let (b, o) = (idx / c_out, idx % c_out);
            let in_base = (o / cout_g) * cin_g;
            conv_plane(
                input,
                b,
                in_base,
                kernels.outer(o),
                side,
                side,
                &per_channel[o],
                plane,
                wo,
            );
        });
    }
    Tensor4::new([n, c_out, ho, wo], out)
}

/// Executes zero-embedded supernet weights directly: dense convolution with
/// padding `k·d_max`.
pub fn reference_full(input: &Tensor4, weights: &Tensor4, spec: &LayerSpec) -> Result<Tensor4> {
    spec.validate()?;
    spec.check_supernet_weights(weights.dims())?;
    check_input(input, spec)?;
    conv2d(input, weights, &supernet_geometry(spec))
}

fn apply_affine(t: Tensor4, affine: &Affine) -> Tensor4 {
    let [n, c, h, w] = t.dims();
    let plane = h * w;
    let mut data = t.into_data();
    for (idx, v) in data.iter_mut().enumerate() {
        let ch = (idx / plane) % c;
        *v = (*v as f64 * affine.scale[ch] as f64 + affine.bias[ch] as f64) as f32;
    }
    Tensor4::new([n, c, h, w], data).expect("affine keeps values finite")
}

/// Runs a whole chain. Supernet layers use [`reference_full`]; inception
/// layers use [`run_inception`]. Outputs come out in the model's own channel
/// order (see `final_output_perm`).
pub fn forward(model: &ModelContainer, input: &Tensor4) -> Result<Tensor4> {
    let mut x = input.clone();
    for layer in &model.layers {
        let spec = &layer.spec;
        x = match model.kind {
            ModelKind::Supernet => reference_full(&x, &layer.weights, spec)?,
            ModelKind::Inception if spec.is_searchable() => run_inception(&x, &layer.grouped_plan()?, spec)?,
            ModelKind::Inception => {
                check_input(&x, spec)?;
                conv2d(&x, &layer.weights, &standard_geometry(spec))?
            }
        };
        if let Some(affine) = &layer.affine {
            x = apply_affine(x, affine);
        }
    }
    Ok(x)
}

/// Restores original channel order of a model output given
/// `final_output_perm`.
pub fn unpermute_output(output: &Tensor4, final_perm: Option<&[usize]>) -> Result<Tensor4> {
    match final_perm {
        None => Ok(output.clone()),
        Some(perm) => {
            let inv = ChannelPermutation::new(perm.to_vec())?.inverse();
            output.permute_axis1(inv.as_slice())
        }
    }
}

/// Multiply-accumulate counts for one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub macs_standard: u64,
    pub macs_inception: u64,
    pub macs_supernet: u64,
    pub macs_darts_style: u64,
    pub ratio_edo_over_darts: f64,
}

/// Output spatial dims shared by the standard, inception and supernet forms.
pub fn same_output_dims(spec: &LayerSpec, h: usize, w: usize) -> (usize, usize) {
    ((h - 1) / spec.stride[0] + 1, (w - 1) / spec.stride[1] + 1)
}

/// MACs for one layer on an `h × w` input. The supernet figure counts every
/// tap of the enlarged kernel; the DARTS-style figure runs all `d_max²`
/// candidate dilations side by side.
pub fn cost_model(spec: &LayerSpec, h: usize, w: usize) -> Result<CostReport> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(geom_err("input dims must be positive"));
    }
    let (ho, wo) = same_output_dims(spec, h, w);
    let positions = (ho * wo) as u64;
    let pairs = (spec.cin_per_group() * spec.c_out) as u64;
    let base = (spec.compact_side() as u64).pow(2);
    let enlarged = (spec.supernet_side() as u64).pow(2);
    let candidates = (spec.d_max as u64).pow(2);

    let macs_standard = pairs * base * positions;
    let macs_supernet = pairs * enlarged * positions;
    let macs_darts_style = macs_standard * candidates;
    Ok(CostReport {
        macs_standard,
        macs_inception: macs_standard,
        macs_supernet,
        macs_darts_style,
        ratio_edo_over_darts: macs_supernet as f64 / macs_darts_style as f64,
    })
}

/// MACs actually issued by [`run_inception`]: the per-group sum.
pub fn plan_macs(plan: &GroupedPlan, spec: &LayerSpec, h: usize, w: usize) -> u64 {
    let (ho, wo) = same_output_dims(spec, h, w);
    let per_channel = (spec.cin_per_group() * spec.compact_side().pow(2) * ho * wo) as u64;
    plan.groups.iter().map(|g| g.count as u64 * per_channel).sum()
}

/// Wall-time quantiles in nanoseconds.
#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub median: u64,
    pub p10: u64,
    pub p90: u64,
}

impl Timing {
    fn from_samples(mut samples: Vec<u64>) -> Self {
        samples.sort_unstable();
        let at = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
        Timing {
            median: at(0.5),
            p10: at(0.1),
            p90: at(0.9),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchTimings {
    pub standard_ns: Timing,
    pub inception_ns: Timing,
    pub inception_over_standard: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub layer: String,
    pub input: [usize; 4],
    pub macs_standard: u64,
    pub macs_inception: u64,
    pub mac_ratio: f64,
    /// Machine-dependent; everything above is deterministic.
    pub timings: BenchTimings,
}

/// Times a standard `(2k+1)²` convolution against the inception executor on
/// the same compact kernels and a seeded input.
pub fn bench(plan: &GroupedPlan, spec: &LayerSpec, input_dims: [usize; 4], repetitions: usize) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(geom_err("bench needs at least 3 repetitions"));
    }
    let mut rng = Prng::new(0x1cd1_1a7e);
    let input = Tensor4::new(input_dims, rng.fill(input_dims.iter().product(), Default::default()))?;
    let geom = standard_geometry(spec);
    // Warm-up and shape check.
    conv2d(&input, &plan.compact_kernels, &geom)?;
    run_inception(&input, plan, spec)?;

    let time = |f: &dyn Fn() -> Result<Tensor4>| -> Result<Vec<u64>> {
        (0..repetitions)
            .map(|_| {
                let start = Instant::now();
                f()?;
                Ok(start.elapsed().as_nanos() as u64)
            })
            .collect()
    };
    let standard = Timing::from_samples(time(&|| conv2d(&input, &plan.compact_kernels, &geom))?);
    let inception = Timing::from_samples(time(&|| run_inception(&input, plan, spec))?);

    let (h, w) = (input_dims[2], input_dims[3]);
    let standard_macs = cost_model(spec, h, w)?.macs_standard * input_dims[0] as u64;
    let inception_macs = plan_macs(plan, spec, h, w) * input_dims[0] as u64;
    Ok(BenchReport {
        layer: spec.name.clone(),
        input: input_dims,
        macs_standard: standard_macs,
        macs_inception: inception_macs,
        mac_ratio: inception_macs as f64 / standard_macs as f64,
        timings: BenchTimings {
            inception_over_standard: inception.median as f64 / standard.median.max(1) as f64,
            standard_ns: standard,
            inception_ns: inception,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rearrange::{expand_compact, extract_compact};
    use crate::search::{Assignment, DilationPattern};

    fn p(dx: usize, dy: usize) -> DilationPattern {
        DilationPattern::new(dx, dy)
    }

    fn seeded(dims: [usize; 4], seed: u64) -> Tensor4 {
        let mut r = Prng::new(seed);
        Tensor4::new(dims, r.fill(dims.iter().product(), Default::default())).unwrap()
    }

    fn plan_for(spec: &LayerSpec, patterns: Vec<DilationPattern>, seed: u64) -> (Tensor4, GroupedPlan) {
        let s = spec.supernet_side();
        let w = seeded([spec.c_out, spec.cin_per_group(), s, s], seed);
        let n = patterns.len();
        let a = Assignment {
            layer: spec.name.clone(),
            d_max: spec.d_max,
            patterns,
            errors: vec![0.0; n],
        };
        let plan = extract_compact(&w, &a, spec).unwrap();
        (w, plan)
    }

    #[test]
    fn dense_single_group_is_standard_conv() {
        let spec = LayerSpec::new("l", 1, 2, 3, 4);
        let (_, plan) = plan_for(&spec, vec![p(1, 1); 4], 1);
        let x = seeded([2, 3, 7, 6], 2);
        let got = run_inception(&x, &plan, &spec).unwrap();
        let want = conv2d(&x, &plan.compact_kernels, &standard_geometry(&spec)).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn mixed_groups_match_full_reference() {
        let spec = LayerSpec::new("l", 1, 2, 2, 4);
        let (_, plan) = plan_for(&spec, vec![p(2, 2), p(1, 1), p(1, 1), p(2, 2)], 3);
        let x = seeded([1, 2, 9, 9], 4);
        let got = run_inception(&x, &plan, &spec).unwrap();
        let embedded = expand_compact(&plan.compact_kernels, &plan.channel_patterns(), 1, 2).unwrap();
        let want = reference_full(&x, &embedded, &spec).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn stride_two_output_dims() {
        for pat in DilationPattern::enumerate(3) {
            let spec = LayerSpec::new("l", 1, 3, 2, 2).with_stride(2, 2);
            let (_, plan) = plan_for(&spec, vec![pat; 2], 5);
            let x = seeded([1, 2, 8, 8], 6);
            assert_eq!(run_inception(&x, &plan, &spec).unwrap().dims(), [1, 2, 4, 4]);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = LayerSpec::new("l", 1, 2, 2, 3);
        let x = seeded([1, 2, 6, 6], 7);
        let y = reference_full(&x, &Tensor4::zeros([3, 2, 5, 5]), &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plan_spec_mismatch() {
        let spec = LayerSpec::new("l", 1, 2, 2, 3);
        let (_, plan) = plan_for(&spec, vec![p(1, 1); 3], 1);
        let other = LayerSpec::new("l", 1, 2, 2, 4);
        assert!(run_inception(&seeded([1, 2, 5, 5], 1), &plan, &other).is_err());
        assert!(run_inception(&seeded([1, 3, 5, 5], 1), &plan, &spec).is_err());
    }

    #[test]
    fn cost_ratios() {
        let r = cost_model(&LayerSpec::new("l", 1, 4, 64, 64), 56, 56).unwrap();
        assert_eq!(r.ratio_edo_over_darts, 0.5625);
        assert_eq!(r.macs_inception, r.macs_standard);
        assert_eq!(r.macs_supernet * 144, r.macs_darts_style * 81);
        let r = cost_model(&LayerSpec::new("l", 1, 1, 8, 8), 10, 10).unwrap();
        assert_eq!(r.ratio_edo_over_darts, 1.0);
        let r = cost_model(&LayerSpec::new("l", 2, 2, 8, 8), 10, 10).unwrap();
        assert_eq!(r.ratio_edo_over_darts, 0.81);
    }

    #[test]
    fn cost_counts_are_explicit() {
        let spec = LayerSpec::new("l", 1, 2, 4, 6).with_groups(2).with_stride(2, 2);
        let r = cost_model(&spec, 8, 8).unwrap();
        assert_eq!(r.macs_standard, 2 * 6 * 9 * 16);
        assert_eq!(r.macs_supernet, 2 * 6 * 25 * 16);
        assert_eq!(r.macs_darts_style, 2 * 6 * 9 * 4 * 16);
    }

    #[test]
    fn bench_reports_both_timings() {
        let spec = LayerSpec::new("l", 1, 2, 8, 8);
        let (_, plan) = plan_for(
            &spec,
            vec![p(1, 1), p(2, 1), p(1, 2), p(2, 2), p(1, 1), p(1, 1), p(2, 2), p(2, 1)],
            9,
        );
        let r = bench(&plan, &spec, [1, 8, 32, 32], 3).unwrap();
        assert_eq!(r.mac_ratio, 1.0);
        assert!(r.timings.standard_ns.median > 0 && r.timings.inception_ns.median > 0);
        assert!(bench(&plan, &spec, [1, 8, 32, 32], 2).is_err());
    }
}
