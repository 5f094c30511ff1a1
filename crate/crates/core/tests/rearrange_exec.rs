mod common;

use common::{seeded, seeded_from};
use icdilate::container::{generate, LayerDecl};
use icdilate::exec::{cost_model, forward, plan_macs, reference_full, run_inception, unpermute_output};
use icdilate::oracle::{forward_naive, Tensor64};
use icdilate::rearrange::{apply, embed_model, expand_compact, extract_compact, propagate};
use icdilate::search::{edo_layer, edo_model, Assignment, DilationPattern, LayerSpec};
use icdilate::{Distribution, Prng};
use proptest::prelude::*;

fn random_assignment(rng: &mut Prng, spec: &LayerSpec) -> Assignment {
    let all: Vec<_> = DilationPattern::enumerate(spec.d_max).collect();
    Assignment {
        layer: spec.name.clone(),
        d_max: spec.d_max,
        patterns: (0..spec.c_out).map(|_| all[rng.below(all.len())]).collect(),
        errors: vec![0.0; spec.c_out],
    }
}

#[test]
fn two_layer_propagation_preserves_function() {
    let layers = vec![
        LayerDecl::new(LayerSpec::new("a", 1, 2, 3, 6), true),
        LayerDecl::new(LayerSpec::new("b", 1, 2, 6, 4), true),
    ];
    let m = generate(31, &layers, Distribution::default()).unwrap();
    let mut rng = Prng::new(1);
    let plans: Vec<_> = m
        .layers
        .iter()
        .map(|l| Some(extract_compact(&l.weights, &random_assignment(&mut rng, &l.spec), &l.spec).unwrap()))
        .collect();
    let out = propagate(&m, &plans).unwrap();
    let x = seeded([2, 3, 9, 9], 4);
    let want = forward(&m, &x).unwrap();
    let got = unpermute_output(&forward(&out, &x).unwrap(), out.final_output_perm.as_deref()).unwrap();
    assert!(got.max_rel_diff(&want, 1e-2).unwrap() <= 1e-5);

    // The f64 route is exact: permutations only reorder identical sums.
    let x64 = Tensor64::from(&x);
    let want = forward_naive(&m, &x64).unwrap();
    let got = forward_naive(&out, &x64).unwrap();
    let perm = out.final_output_perm.clone().unwrap();
    for (new, &old) in perm.iter().enumerate() {
        for y in 0..got.dims[2] {
            for xx in 0..got.dims[3] {
                assert_eq!(got.get(1, new, y, xx), want.get(1, old, y, xx));
            }
        }
    }
}

#[test]
fn plan_groups_are_sorted_and_bounded() {
    let mut rng = Prng::new(8);
    for d_max in 2..=4 {
        for groups in [1, 2, 4] {
            let spec = LayerSpec::new("l", 1, d_max, 4, 16).with_groups(groups);
            let w = seeded_from(
                &mut rng,
                [16, spec.cin_per_group(), spec.supernet_side(), spec.supernet_side()],
            );
            let plan = extract_compact(&w, &random_assignment(&mut rng, &spec), &spec).unwrap();
            plan.check_against(&spec).unwrap();
            let block = spec.cout_per_group();
            for range in 0..groups {
                let in_range: Vec<_> = plan.groups.iter().filter(|g| g.start / block == range).collect();
                assert!(in_range.len() <= d_max * d_max);
                assert!(in_range.windows(2).all(|w| w[0].pattern < w[1].pattern));
            }
            let expanded = expand_compact(&plan.compact_kernels, &plan.channel_patterns(), 1, d_max).unwrap();
            let side = spec.supernet_side();
            for (new, p) in plan.channel_patterns().into_iter().enumerate() {
                let pos = icdilate::search::sampled_positions(1, d_max, p).unwrap();
                for (idx, &v) in expanded.outer(new).iter().enumerate() {
                    let rc = ((idx % (side * side)) / side, idx % side);
                    if v != 0.0 {
                        assert!(pos.contains(&rc));
                    }
                }
            }
        }
    }
}

#[test]
fn depthwise_chain_round_trip() {
    let layers = vec![
        LayerDecl::new(LayerSpec::new("stem", 1, 3, 2, 8), true),
        LayerDecl::new(LayerSpec::new("dw", 1, 3, 8, 8).with_groups(8), true),
        LayerDecl::new(LayerSpec::new("pw", 0, 3, 8, 6), false),
        LayerDecl::new(
            LayerSpec::new("head", 1, 3, 6, 4).with_groups(2).with_stride(2, 2),
            true,
        ),
    ];
    let m = generate(3, &layers, Distribution::default()).unwrap();
    let search = edo_model(&m, 3).unwrap();
    let ic = apply(&m, &search).unwrap();
    let reference = embed_model(&m, &search).unwrap();
    // Depthwise successor pins the stem's permutation to the identity.
    assert!(ic.layers[0]
        .plan
        .as_ref()
        .unwrap()
        .perm
        .iter()
        .enumerate()
        .all(|(i, &p)| i == p));
    let x = seeded([1, 2, 11, 11], 6);
    let want = forward(&reference, &x).unwrap();
    let got = unpermute_output(&forward(&ic, &x).unwrap(), ic.final_output_perm.as_deref()).unwrap();
    assert!(got.max_rel_diff(&want, 1e-2).unwrap() <= 1e-5);
}

#[test]
fn mac_parity_for_every_plan() {
    let mut rng = Prng::new(17);
    for _ in 0..50 {
        let d_max = 1 + rng.below(4);
        let groups = [1, 2, 4][rng.below(3)];
        let spec = LayerSpec::new("m", 1, d_max, 4 * (1 + rng.below(2)), 4 * (1 + rng.below(3)))
            .with_groups(groups)
            .with_stride(1 + rng.below(2), 1 + rng.below(2));
        let s = spec.supernet_side();
        let w = seeded_from(&mut rng, [spec.c_out, spec.cin_per_group(), s, s]);
        let plan = extract_compact(&w, &edo_layer(&w, &spec).unwrap(), &spec).unwrap();
        let (h, wd) = (5 + rng.below(20), 5 + rng.below(20));
        let report = cost_model(&spec, h, wd).unwrap();
        assert_eq!(plan_macs(&plan, &spec, h, wd), report.macs_standard);
        assert_eq!(report.macs_inception, report.macs_standard);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inception_matches_reference(
        seed in any::<u64>(),
        d_max in 2usize..=4,
        stride in 1usize..=2,
        groups_kind in 0usize..3,
        hw in (6usize..14, 6usize..14),
    ) {
        let c_in = 4;
        let groups = [1, 2, c_in][groups_kind];
        let spec = LayerSpec::new("p", 1, d_max, c_in, 8).with_groups(groups).with_stride(stride, stride);
        let mut rng = Prng::new(seed);
        let s = spec.supernet_side();
        let w = seeded_from(&mut rng, [8, spec.cin_per_group(), s, s]);
        let plan = extract_compact(&w, &random_assignment(&mut rng, &spec), &spec).unwrap();
        let x = seeded_from(&mut rng, [1, c_in, hw.0, hw.1]);
        let got = run_inception(&x, &plan, &spec).unwrap();
        let full = expand_compact(&plan.compact_kernels, &plan.channel_patterns(), 1, d_max).unwrap();
        let want = reference_full(&x, &full, &spec).unwrap();
        prop_assert_eq!(&got, &want);

        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        prop_assert_eq!(one.install(|| run_inception(&x, &plan, &spec)).unwrap(), got);
    }
}
