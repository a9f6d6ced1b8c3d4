use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tea_core::analyzer::{analyze, count_params, temporal_rf};
use tea_core::block::BlockVariant;
use tea_core::data::{generate_dataset, sample_indices, segment_bounds, SampleMode, SyntheticSpec};
use tea_core::kernel::{ConvGeometry, ConvKernel};
use tea_core::me::{MotionExcitation, SqueezeExcite};
use tea_core::mta::{mta_param_count, probe_spatial_rf, probe_temporal_rf, Aggregation, Mta, RunOpts};
use tea_core::network::{probe_network_extent, Network, NetworkSpec, StageSpec};
use tea_core::selfcheck::reverse_time;
use tea_core::shift::TemporalFlavor;
use tea_core::{Mode, Module, Real, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn run<F: Real>(x: &Tensor<F>, f: impl FnOnce(&mut Tape<F>, Var) -> tea_core::Result<Var>) -> Tensor<F> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let y = f(&mut tape, v).unwrap();
    tape.value(y).clone()
}

fn bits_equal<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_f64_lossy().to_bits() == q.to_f64_lossy().to_bits())
}

fn static_clip(frame: &Tensor<f64>, t: usize) -> Tensor<f64> {
    let mut shape = frame.shape().to_vec();
    shape[1] = t;
    let mut data = Vec::new();
    for one in frame.data().chunks(frame.len() / shape[0]) {
        for _ in 0..t {
            data.extend_from_slice(one);
        }
    }
    Tensor::new(&shape, data).unwrap()
}

fn permute_time(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let [n, t, c, h, w] = x.dims5().unwrap();
    let frame = c * h * w;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for &src in perm {
            let s = (b * t + src) * frame;
            out.extend_from_slice(&x.data()[s..s + frame]);
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

/// ME with random biases and a random `conv_trans`.
fn generic_me(c: usize, r: usize, seed: u64) -> MotionExcitation<f64> {
    let mut g = rng(seed);
    let mut me = MotionExcitation::new(c, r, false, &mut g).unwrap();
    for p in me.params_mut() {
        if p.name.ends_with("bias") || p.name.starts_with("conv_trans") {
            p.value = Tensor::randn(p.value.shape(), 0.5, &mut g);
        }
    }
    me
}

fn me_case() -> impl Strategy<Value = (usize, usize, [usize; 5], u64)> {
    (prop::sample::select(vec![(4usize, 1usize), (4, 2), (8, 2), (8, 4), (16, 8), (16, 16)]), 1usize..=2, 1usize..=6, 1usize..=5, 1usize..=5, any::<u64>())
        .prop_map(|((c, r), n, t, h, w, seed)| (c, r, [n, t, c, h, w], seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn same_padding_keeps_space_and_time(n in 1usize..=2, t in 1usize..=6, c in 1usize..=5, h in 1usize..=8, w in 1usize..=8,
                                         k in prop::sample::select(vec![1usize, 3, 5, 7]), seed in any::<u64>()) {
        let mut g = rng(seed);
        let x = Tensor::<f32>::randn(&[n, t, c, h, w], 1.0, &mut g);
        let conv = ConvKernel::randn(ConvGeometry::spatial(c, 2 * c, k, 1), true, 1.0, &mut g).unwrap();
        let temp = ConvKernel::randn(ConvGeometry::temporal_cw(c, 3), false, 1.0, &mut g).unwrap();
        let y = run(&x, |tp, v| tp.conv2d(v, &conv));
        let z = run(&x, |tp, v| tp.temporal_conv1d_cw(v, &temp));
        prop_assert_eq!(y.shape(), &[n, t, 2 * c, h, w]);
        prop_assert_eq!(z.shape(), x.shape());
    }

    #[test]
    fn zero_excitation_is_bit_exact_identity((c, r, shape, seed) in me_case()) {
        let mut me = generic_me(c, r, seed);
        me.zero_excitation();
        let x = Tensor::<f64>::randn(&shape, 2.0, &mut rng(seed ^ 1));
        let y = run(&x, |tp, v| me.forward(tp, v, Mode::Eval));
        prop_assert!(bits_equal(&x, &y));
        let me32 = me.cast::<f32>();
        let x32 = x.cast::<f32>();
        let y32 = run(&x32, |tp, v| me32.forward(tp, v, Mode::Train));
        prop_assert!(bits_equal(&x32, &y32));
    }

    #[test]
    fn attention_stays_inside_open_interval((c, r, shape, seed) in me_case()) {
        let me = generic_me(c, r, seed);
        let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng(seed ^ 2));
        let a = run(&x, |tp, v| me.attention(tp, v, Mode::Eval));
        prop_assert_eq!(a.shape(), &[shape[0], shape[1], c, 1, 1]);
        prop_assert!(a.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn static_video_gives_zero_attention((c, r, shape, seed) in me_case()) {
        // Default init: zero biases, identity conv_trans.
        let me = MotionExcitation::<f64>::new(c, r, false, &mut rng(seed)).unwrap();
        let mut one = shape;
        one[1] = 1;
        let frame = Tensor::<f64>::randn(&one, 1.0, &mut rng(seed ^ 3));
        let x = static_clip(&frame, shape[1]);
        let a = run(&x, |tp, v| me.attention(tp, v, Mode::Eval));
        prop_assert!(a.data().iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn reversing_frames_changes_attention((c, r, mut shape, seed) in me_case(), extra in 2usize..=4) {
        shape[1] += extra;
        let me = generic_me(c, r, seed);
        let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng(seed ^ 4));
        let a = run(&x, |tp, v| me.attention(tp, v, Mode::Eval));
        let b = run(&reverse_time(&x).unwrap(), |tp, v| me.attention(tp, v, Mode::Eval));
        prop_assert!(reverse_time(&b).unwrap().max_abs_diff(&a).unwrap() > 1e-6);
    }

    #[test]
    fn se_gate_stays_inside_unit_interval((c, r, shape, seed) in me_case()) {
        let se = SqueezeExcite::<f64>::new(c, r, &mut rng(seed)).unwrap();
        let x = Tensor::<f64>::randn(&shape, 2.0, &mut rng(seed ^ 5));
        let s = run(&x, |tp, v| se.gate(tp, v));
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mta_keeps_shape_and_first_fragment(q in 1usize..=6, n in 1usize..=2, t in 1usize..=6, h in 1usize..=6, w in 1usize..=6,
                                          activations in any::<bool>(), train in any::<bool>(), seed in any::<u64>()) {
        let c = 4 * q;
        let mut g = rng(seed);
        let mut m = Mta::<f32>::new(c, 1, Aggregation::Hierarchical, TemporalFlavor::Cw, activations, &mut g).unwrap();
        // Arbitrary "trained" state.
        for p in m.params_mut() {
            p.value = Tensor::randn(p.value.shape(), 0.8, &mut g);
        }
        let x = Tensor::<f32>::randn(&[n, t, c, h, w], 1.0, &mut g);
        let opts = if train { RunOpts::train() } else { RunOpts::eval() };
        let y = run(&x, |tp, v| m.forward(tp, v, opts));
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(bits_equal(&y.slice_channels(0, q).unwrap(), &x.slice_channels(0, q).unwrap()));
    }

    #[test]
    fn segments_partition_the_clip(raw in 1usize..=200, t in 1usize..=32) {
        let segs = segment_bounds(raw, t);
        prop_assert_eq!(segs.len(), t);
        prop_assert_eq!(segs[0].0, 0);
        prop_assert_eq!(segs[t - 1].1, raw);
        prop_assert!(segs.windows(2).all(|s| s[0].1 == s[1].0));
        let sizes: Vec<usize> = segs.iter().map(|(a, b)| b - a).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn sampled_frames_fall_in_their_segments(raw in 1usize..=120, t in 1usize..=16, seed in any::<u64>()) {
        prop_assume!(raw >= t);
        let segs = segment_bounds(raw, t);
        for mode in [SampleMode::Test, SampleMode::Train { seed }] {
            let idx = sample_indices(raw, t, mode).unwrap();
            prop_assert!(idx.iter().zip(&segs).all(|(&i, &(lo, hi))| lo <= i && i < hi));
        }
        prop_assert_eq!(sample_indices(raw, t, SampleMode::Train { seed }).unwrap(),
                        sample_indices(raw, t, SampleMode::Train { seed }).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn dataset_is_reproducible(seed in any::<u64>(), first in 0u64..1000) {
        let spec = SyntheticSpec { seed, ..SyntheticSpec::default() };
        let a = generate_dataset(&spec, 2, first).unwrap();
        prop_assert_eq!(&a, &generate_dataset(&spec, 2, first).unwrap());
        prop_assert!(a.iter().all(|c| c.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn builds_from_one_seed_agree_bit_for_bit(seed in any::<u64>(), v in 0usize..8) {
        let spec = NetworkSpec::toy(BlockVariant::ALL[v]);
        let x = Tensor::<f32>::randn(&[1, 8, 3, 16, 16], 1.0, &mut rng(seed));
        let logits = || {
            let net = Network::<f32>::build(&spec, seed).unwrap();
            run(&x, |tp, xv| net.logits(tp, xv, RunOpts::train(), None))
        };
        prop_assert!(bits_equal(&logits(), &logits()));
    }

    #[test]
    fn plain_network_ignores_frame_order(seed in any::<u64>()) {
        let net = Network::<f32>::build(&NetworkSpec::toy(BlockVariant::Plain2d), seed).unwrap().cast::<f64>();
        let mut g = rng(seed);
        let x = Tensor::<f64>::randn(&[2, 8, 3, 16, 16], 1.0, &mut g);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut g);
        let a = run(&x, |tp, v| net.logits(tp, v, RunOpts::eval(), None));
        let b = run(&permute_time(&x, &perm), |tp, v| net.logits(tp, v, RunOpts::eval(), None));
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn tea_network_sees_frame_order(seed in any::<u64>()) {
        let mut spec = NetworkSpec::toy(BlockVariant::Tea);
        spec.flavor = TemporalFlavor::Cw;
        let net = Network::<f32>::build(&spec, seed).unwrap().cast::<f64>();
        let mut g = rng(seed);
        let x = Tensor::<f64>::randn(&[1, 8, 3, 16, 16], 1.0, &mut g);
        let perm = [1, 0, 2, 3, 4, 5, 6, 7];
        let a = run(&x, |tp, v| net.logits(tp, v, RunOpts::eval(), None));
        let b = run(&permute_time(&x, &perm), |tp, v| net.logits(tp, v, RunOpts::eval(), None));
        prop_assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
    }

    #[test]
    fn shift_init_networks_compute_the_shift_function(seed in any::<u64>(), v in 0usize..8) {
        let variant = BlockVariant::ALL[v];
        prop_assume!(variant.has_temporal());
        let mut spec = NetworkSpec::toy(variant);
        spec.flavor = TemporalFlavor::ShiftInit;
        let net = Network::<f32>::build(&spec, seed).unwrap();
        let x = Tensor::<f32>::randn(&[2, 8, 3, 16, 16], 1.0, &mut rng(seed));
        let with = |substitute_shift| {
            run(&x, |tp, xv| net.frame_logits(tp, xv, RunOpts { mode: Mode::Eval, substitute_shift }, None))
        };
        prop_assert!(with(false).max_abs_diff(&with(true)).unwrap() < 1e-6);
    }
}

#[test]
fn mta_temporal_radii_over_five_seeds() {
    for seed in 0..5 {
        let m = Mta::<f64>::random(8, Aggregation::Hierarchical, 1.0, &mut rng(seed)).unwrap();
        assert_eq!(probe_temporal_rf(&m, 9).unwrap(), [0, 1, 2, 3], "seed {seed}");
        assert_eq!(probe_temporal_rf(&m, 7).unwrap(), [0, 1, 2, 3], "seed {seed}, T=7");
    }
}

#[test]
fn res2net_fragments_share_one_temporal_step() {
    let m = Mta::<f64>::random(8, Aggregation::ParallelRes2Net, 1.0, &mut rng(9)).unwrap();
    assert_eq!(probe_temporal_rf(&m, 9).unwrap(), [1, 1, 1, 1]);
}

#[test]
fn mta_spatial_radii_over_five_seeds() {
    for seed in 0..5 {
        let m = Mta::<f64>::random(12, Aggregation::Hierarchical, 1.0, &mut rng(100 + seed)).unwrap();
        assert_eq!(probe_spatial_rf(&m, 9).unwrap(), [0, 1, 2, 3], "seed {seed}");
    }
}

#[test]
fn mta_has_fewer_params_than_one_3x3_conv() {
    for c in (4..=512).step_by(4) {
        let q = c / 4;
        let closed = 3 * 9 * q * q + 3 * 3 * q;
        assert_eq!(mta_param_count(c, false), closed, "C={c}");
        assert!(closed < 9 * c * c, "C={c}");
    }
    for c in [4, 8, 36, 128] {
        let m = Mta::<f32>::new(c, 1, Aggregation::Hierarchical, TemporalFlavor::Cw, false, &mut rng(c as u64)).unwrap();
        assert_eq!(m.num_params(), mta_param_count(c, false));
    }
}

#[test]
fn stacked_mta_stage_has_radius_six() {
    let mut spec = NetworkSpec::toy(BlockVariant::MtaOnly);
    spec.flavor = TemporalFlavor::Cw;
    spec.stages = vec![StageSpec {
        blocks: 2,
        bottleneck: 8,
        out_channels: 16,
        stride: 1,
    }];
    let spec = spec.with_input(15, 16, 16);
    assert_eq!(temporal_rf(&spec).unwrap().cumulative.radius, 6);
    for seed in 0..3 {
        let net = Network::<f32>::build(&spec, seed).unwrap().cast::<f64>();
        assert_eq!(probe_network_extent(&net, 15, seed).unwrap().radius, 6, "seed {seed}");
    }
}

#[test]
fn analytic_extent_matches_probe_for_every_toy_spec() {
    let mut specs: Vec<NetworkSpec> = BlockVariant::ALL
        .iter()
        .map(|&v| {
            let mut s = NetworkSpec::toy(v);
            s.flavor = TemporalFlavor::Cw;
            s
        })
        .collect();
    let mut masked = NetworkSpec::toy(BlockVariant::Tea);
    masked.flavor = TemporalFlavor::Cw;
    masked.stage_mask = Some(vec![false, true]);
    specs.push(masked);
    for spec in specs {
        let rf = temporal_rf(&spec).unwrap().cumulative;
        let frames = 2 * rf.past.max(rf.future) + 3;
        let spec = spec.with_input(frames, 16, 16);
        for seed in [1, 2] {
            let net = Network::<f32>::build(&spec, seed).unwrap().cast::<f64>();
            assert_eq!(probe_network_extent(&net, frames, seed).unwrap(), rf, "{:?} seed {seed}", spec.variant);
        }
    }
}

#[test]
fn counts_depend_only_on_shapes() {
    for v in BlockVariant::ALL {
        let spec = NetworkSpec::toy(v);
        let counted = count_params(&spec).unwrap().total as usize;
        for seed in [3, 4] {
            assert_eq!(Network::<f32>::build(&spec, seed).unwrap().num_params(), counted, "{v:?}");
        }
    }
    let a = serde_json::to_string(&analyze(&NetworkSpec::resnet50_tea(), 8, 224, 224).unwrap()).unwrap();
    let b = serde_json::to_string(&analyze(&NetworkSpec::resnet50_tea(), 8, 224, 224).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn worker_count_does_not_change_results() {
    use tea_core::data::generate_dataset_parallel;
    use tea_core::train::{evaluate, evaluate_parallel};
    let spec = SyntheticSpec { seed: 8, ..SyntheticSpec::default() };
    let serial = generate_dataset(&spec, 5, 12).unwrap();
    for workers in [2, 3, 7, 64] {
        assert_eq!(generate_dataset_parallel(&spec, 5, 12, workers).unwrap(), serial, "{workers} workers");
    }
    let net = Network::<f32>::build(&NetworkSpec::toy(BlockVariant::Tea), 8).unwrap();
    let one = evaluate(&net, &serial, 8, 4).unwrap();
    for workers in [2, 3, 20] {
        assert_eq!(evaluate_parallel(&net, &serial, 8, 4, workers).unwrap().to_bits(), one.to_bits());
    }
}
