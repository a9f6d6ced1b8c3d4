//! Runtime property suite behind the `selfcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyzer::{count_flops, count_params, temporal_rf};
use crate::block::{Block, BlockSpec, BlockVariant};
use crate::data::{generate_dataset, sample_indices, segment_bounds, SampleMode, SyntheticSpec};
use crate::error::Result;
use crate::gradcheck::grad_check_module;
use crate::kernel::{ConvGeometry, ConvKernel};
use crate::me::{MotionExcitation, SqueezeExcite};
use crate::mta::{mta_param_count, probe_spatial_rf, probe_temporal_rf, Aggregation, Mta, RunOpts};
use crate::network::{probe_network_extent, Network, NetworkSpec, StageSpec};
use crate::nn::Mode;
use crate::ops;
use crate::param::Module;
use crate::shift::{equivalence_sweep, TemporalFlavor};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub module: String,
    pub name: String,
    pub passed: bool,
    /// Whether the property restates a published claim of the method
    /// rather than an internal consistency check.
    pub claim: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub seed: u64,
    pub fault_injected: bool,
    pub passed: usize,
    pub failed: usize,
    pub claim_checks: usize,
    pub properties: Vec<PropertyResult>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

type Check = fn(u64) -> Result<(bool, String)>;

const CHECKS: &[(&str, &str, bool, Check)] = &[
    ("tensor-core", "same_padding_preserves_shape", false, same_padding_preserves_shape),
    ("tensor-core", "forward_is_deterministic", false, forward_is_deterministic),
    ("me", "zero_excitation_is_identity", false, zero_excitation_is_identity),
    ("me", "attention_in_open_interval", true, attention_in_open_interval),
    ("me", "static_input_has_zero_attention", false, static_input_has_zero_attention),
    ("me", "reversal_changes_attention", true, reversal_changes_attention),
    ("me", "se_gate_in_unit_interval", false, se_gate_in_unit_interval),
    ("me", "me_gradients", false, me_gradients),
    ("me", "se_gradients", false, se_gradients),
    ("mta", "shape_and_fragment_one_identity", false, mta_shape_and_identity),
    ("mta", "temporal_radii_0123", true, mta_temporal_radii),
    ("mta", "spatial_radii_0123", true, mta_spatial_radii),
    ("mta", "fewer_params_than_3x3_conv", true, mta_param_economy),
    ("mta", "mta_gradients", false, mta_gradients),
    ("tea-net", "shift_conv_equivalence", true, shift_conv_equivalence),
    ("tea-net", "shift_init_network_equals_shift_network", true, shift_init_network),
    ("tea-net", "plain_is_order_blind_tea_is_not", true, frame_order),
    ("tea-net", "stacked_mta_radius_is_additive", true, stacked_radius),
    ("tea-net", "tea_block_gradients", false, tea_block_gradients),
    ("analyzer", "flops_match_reference", true, flops_match_reference),
    ("analyzer", "analytic_rf_matches_probe", false, analytic_rf_matches_probe),
    ("analyzer", "counts_are_shape_driven", false, counts_are_shape_driven),
    ("data", "generation_is_reproducible", false, generation_is_reproducible),
    ("data", "segments_partition_clip", false, segments_partition_clip),
];

/// Runs every property. With `inject_fault`, convolution weight gradients
/// on this thread are sign-flipped for the duration of the run, which the
/// gradient properties must catch.
pub fn run(seed: u64, inject_fault: bool) -> SelfCheckReport {
    ops::set_conv_sign_fault(inject_fault);
    let properties: Vec<PropertyResult> = CHECKS
        .iter()
        .map(|&(module, name, claim, check)| {
            let (passed, detail) = match check(seed) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            PropertyResult {
                module: module.into(),
                name: name.into(),
                passed,
                claim,
                detail,
            }
        })
        .collect();
    ops::set_conv_sign_fault(false);
    let passed = properties.iter().filter(|p| p.passed).count();
    SelfCheckReport {
        seed,
        fault_injected: inject_fault,
        passed,
        failed: properties.len() - passed,
        claim_checks: properties.iter().filter(|p| p.claim).count(),
        properties,
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(salt);
    r
}

fn eval<F: crate::Real>(f: impl FnOnce(&mut Tape<F>) -> Result<crate::Var>) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let y = f(&mut tape)?;
    Ok(tape.value(y).clone())
}

fn same_padding_preserves_shape(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 1);
    for _ in 0..20 {
        let (n, t, c, h, w) = (
            r.gen_range(1..3),
            r.gen_range(1..6),
            r.gen_range(1..5),
            r.gen_range(1..8),
            r.gen_range(1..8),
        );
        let k = [1, 3, 5][r.gen_range(0..3)];
        let x = Tensor::<f64>::randn(&[n, t, c, h, w], 1.0, &mut r);
        let conv = ConvKernel::randn(ConvGeometry::spatial(c, c + 1, k, 1), true, 1.0, &mut r)?;
        let temp = ConvKernel::randn(ConvGeometry::temporal_cw(c, 3), false, 1.0, &mut r)?;
        let y = eval(|tp| {
            let xv = tp.leaf(x.clone(), false);
            tp.conv2d(xv, &conv)
        })?;
        let z = eval(|tp| {
            let xv = tp.leaf(x.clone(), false);
            tp.temporal_conv1d_cw(xv, &temp)
        })?;
        if y.shape() != [n, t, c + 1, h, w] || z.shape() != x.shape() {
            return Ok((false, format!("{:?} -> {:?} / {:?}", x.shape(), y.shape(), z.shape())));
        }
    }
    Ok((true, "20 shapes".into()))
}

fn forward_is_deterministic(seed: u64) -> Result<(bool, String)> {
    let spec = NetworkSpec::toy(BlockVariant::Tea);
    let x = Tensor::<f32>::randn(&[2, 8, 3, 16, 16], 1.0, &mut rng(seed, 2));
    let run = || -> Result<Tensor<f32>> {
        let net = Network::<f32>::build(&spec, seed)?;
        eval(|tp| {
            let xv = tp.leaf(x.clone(), false);
            net.logits(tp, xv, RunOpts::train(), None)
        })
    };
    let (a, b) = (run()?, run()?);
    let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    Ok((same, "toy TEA logits, two builds".into()))
}

fn small_me(seed: u64, salt: u64) -> Result<MotionExcitation<f64>> {
    let mut r = rng(seed, salt);
    let mut me = MotionExcitation::<f64>::new(8, 4, false, &mut r)?;
    for p in me.params_mut() {
        if p.name.ends_with("bias") || p.name.starts_with("conv_trans") {
            p.value = Tensor::randn(p.value.shape(), 0.5, &mut r);
        }
    }
    Ok(me)
}

fn zero_excitation_is_identity(seed: u64) -> Result<(bool, String)> {
    let mut me = small_me(seed, 3)?;
    me.zero_excitation();
    let x = Tensor::<f64>::randn(&[2, 5, 8, 4, 4], 3.0, &mut rng(seed, 4));
    let y = eval(|tp| {
        let xv = tp.leaf(x.clone(), false);
        me.forward(tp, xv, Mode::Eval)
    })?;
    let exact = y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((exact, "bit-exact comparison".into()))
}

fn attention_in_open_interval(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 5);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..200 {
        let mut me = MotionExcitation::<f64>::new(8, 2, false, &mut r)?;
        for p in me.params_mut() {
            if p.name.ends_with("bias") || p.name.starts_with("conv_trans") {
                p.value = Tensor::randn(p.value.shape(), 0.5, &mut r);
            }
        }
        // Unit-scale inputs: far larger ones push |e| past ~37, where 2s - 1
        // rounds to exactly +-1 in f64.
        let x = Tensor::<f64>::randn(&[1, 4, 8, 3, 3], 1.0, &mut r);
        let a = eval(|tp| {
            let xv = tp.leaf(x, false);
            me.attention(tp, xv, Mode::Eval)
        })?;
        for &v in a.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok((lo > -1.0 && hi < 1.0, format!("range [{lo}, {hi}] over 200 draws")))
}

fn static_input_has_zero_attention(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 6);
    let mut me = MotionExcitation::<f64>::new(8, 4, false, &mut r)?;
    for p in me.params_mut() {
        if p.name.ends_with("bias") {
            p.value.data_mut().fill(0.0);
        }
    }
    let frame = Tensor::<f64>::randn(&[1, 1, 8, 4, 4], 1.0, &mut r);
    let mut data = Vec::new();
    for _ in 0..5 {
        data.extend_from_slice(frame.data());
    }
    let x = Tensor::new(&[1, 5, 8, 4, 4], data)?;
    let a = eval(|tp| {
        let xv = tp.leaf(x, false);
        me.attention(tp, xv, Mode::Eval)
    })?;
    let worst = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((worst <= 1e-6, format!("max |A| = {worst:e}")))
}

fn reversal_changes_attention(seed: u64) -> Result<(bool, String)> {
    let me = small_me(seed, 7)?;
    let x = Tensor::<f64>::randn(&[1, 6, 8, 4, 4], 1.0, &mut rng(seed, 8));
    let rev = reverse_time(&x)?;
    let a = eval(|tp| {
        let xv = tp.leaf(x.clone(), false);
        me.attention(tp, xv, Mode::Eval)
    })?;
    let b = eval(|tp| {
        let xv = tp.leaf(rev, false);
        me.attention(tp, xv, Mode::Eval)
    })?;
    let d = reverse_time(&b)?.max_abs_diff(&a)?;
    Ok((d > 1e-6, format!("max difference {d:e}")))
}

/// Reverses the frame axis of `[N, T, ...]`.
pub fn reverse_time<F: crate::Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [n, t, c, h, w] = x.dims5()?;
    let frame = c * h * w;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ti in (0..t).rev() {
            let s = (b * t + ti) * frame;
            out.extend_from_slice(&x.data()[s..s + frame]);
        }
    }
    Tensor::new(&[n, t, c, h, w], out)
}

fn se_gate_in_unit_interval(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 9);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100 {
        let se = SqueezeExcite::<f64>::new(8, 2, &mut r)?;
        let x = Tensor::<f64>::randn(&[1, 3, 8, 3, 3], 3.0, &mut r);
        let s = eval(|tp| {
            let xv = tp.leaf(x, false);
            se.gate(tp, xv)
        })?;
        for &v in s.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok((lo > 0.0 && hi < 1.0, format!("range [{lo}, {hi}]")))
}

fn weights_for(shape: &[usize], seed: u64, salt: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed, salt))
}

fn grad_verdict(err: f64, what: &str) -> (bool, String) {
    (err < GRAD_TOLERANCE, format!("{what}: max relative error {err:e}"))
}

fn me_gradients(seed: u64) -> Result<(bool, String)> {
    let me = small_me(seed, 10)?;
    let x = Tensor::<f64>::randn(&[1, 3, 8, 3, 3], 1.0, &mut rng(seed, 11));
    let wts = weights_for(x.shape(), seed, 12);
    let rep = grad_check_module(&me, &[x], FD_STEP, |m, tp, v| {
        let y = m.forward(tp, v[0], Mode::Train)?;
        tp.weighted_sum(y, &wts)
    })?;
    Ok(grad_verdict(rep.max_rel_error, "ME"))
}

fn se_gradients(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 13);
    let mut se = SqueezeExcite::<f64>::new(8, 4, &mut r)?;
    for p in se.params_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.7, &mut r);
    }
    let x = Tensor::<f64>::randn(&[1, 2, 8, 3, 3], 1.0, &mut r);
    let wts = weights_for(x.shape(), seed, 14);
    let rep = grad_check_module(&se, &[x], FD_STEP, |m, tp, v| {
        let y = m.forward(tp, v[0])?;
        tp.weighted_sum(y, &wts)
    })?;
    Ok(grad_verdict(rep.max_rel_error, "SE"))
}

fn mta_shape_and_identity(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 15);
    for c in [4, 8, 16] {
        let m = Mta::<f64>::new(c, 1, Aggregation::Hierarchical, TemporalFlavor::Conv, true, &mut r)?;
        let x = Tensor::<f64>::randn(&[2, 4, c, 5, 5], 1.0, &mut r);
        let y = eval(|tp| {
            let xv = tp.leaf(x.clone(), false);
            m.forward(tp, xv, RunOpts::train())
        })?;
        if y.shape() != x.shape() {
            return Ok((false, format!("C={c}: shape {:?}", y.shape())));
        }
        let (a, b) = (y.slice_channels(0, c / 4)?, x.slice_channels(0, c / 4)?);
        if a.data().iter().zip(b.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Ok((false, format!("C={c}: fragment 1 altered")));
        }
    }
    Ok((true, "C in {4, 8, 16}".into()))
}

fn mta_temporal_radii(seed: u64) -> Result<(bool, String)> {
    for s in 0..5 {
        let m = Mta::<f64>::random(8, Aggregation::Hierarchical, 1.0, &mut rng(seed.wrapping_add(s), 16))?;
        let radii = probe_temporal_rf(&m, 9)?;
        if radii != [0, 1, 2, 3] {
            return Ok((false, format!("seed offset {s}: {radii:?}")));
        }
    }
    Ok((true, "(0,1,2,3) over 5 seeds".into()))
}

fn mta_spatial_radii(seed: u64) -> Result<(bool, String)> {
    let m = Mta::<f64>::random(8, Aggregation::Hierarchical, 1.0, &mut rng(seed, 17))?;
    let radii = probe_spatial_rf(&m, 9)?;
    Ok((radii == [0, 1, 2, 3], format!("{radii:?}")))
}

fn mta_param_economy(_: u64) -> Result<(bool, String)> {
    for c in (4..=512).step_by(4) {
        let conv = ConvGeometry::spatial(c, c, 3, 1).num_params(false) as usize;
        if mta_param_count(c, false) >= conv {
            return Ok((false, format!("C={c}")));
        }
    }
    let built = Mta::<f32>::new(64, 1, Aggregation::Hierarchical, TemporalFlavor::Cw, false, &mut rng(0, 18))?;
    let ok = built.num_params() == mta_param_count(64, false);
    Ok((ok, "C = 4..512 step 4".into()))
}

fn mta_gradients(seed: u64) -> Result<(bool, String)> {
    let m = Mta::<f64>::random(8, Aggregation::Hierarchical, 0.7, &mut rng(seed, 19))?;
    let x = Tensor::<f64>::randn(&[1, 3, 8, 3, 3], 1.0, &mut rng(seed, 20));
    let wts = weights_for(x.shape(), seed, 21);
    let rep = grad_check_module(&m, &[x], FD_STEP, |m, tp, v| {
        let y = m.forward(tp, v[0], RunOpts::train())?;
        tp.weighted_sum(y, &wts)
    })?;
    Ok(grad_verdict(rep.max_rel_error, "MTA"))
}

fn shift_conv_equivalence(seed: u64) -> Result<(bool, String)> {
    let frames: Vec<usize> = (1..=8).collect();
    let rep = equivalence_sweep(&[8, 16, 64], &frames, 100, seed)?;
    Ok((rep.max_abs_diff == 0.0, format!("{} shapes, max diff {}", rep.cases, rep.max_abs_diff)))
}

fn shift_init_network(seed: u64) -> Result<(bool, String)> {
    let mut spec = NetworkSpec::toy(BlockVariant::Tea);
    spec.flavor = TemporalFlavor::ShiftInit;
    let net = Network::<f32>::build(&spec, seed)?;
    let x = Tensor::<f32>::randn(&[2, 8, 3, 16, 16], 1.0, &mut rng(seed, 22));
    let run = |substitute_shift: bool| {
        eval(|tp| {
            let xv = tp.leaf(x.clone(), false);
            let opts = RunOpts {
                mode: Mode::Eval,
                substitute_shift,
            };
            net.frame_logits(tp, xv, opts, None)
        })
    };
    let d = run(false)?.max_abs_diff(&run(true)?)?;
    Ok((d < 1e-6, format!("max difference {d:e}")))
}

fn frame_order(seed: u64) -> Result<(bool, String)> {
    let x = Tensor::<f64>::randn(&[1, 8, 3, 16, 16], 1.0, &mut rng(seed, 23));
    let rev = reverse_time(&x)?;
    let video = |net: &Network<f64>, x: &Tensor<f64>| {
        eval(|tp| {
            let xv = tp.leaf(x.clone(), false);
            net.logits(tp, xv, RunOpts::eval(), None)
        })
    };
    let plain = Network::<f32>::build(&NetworkSpec::toy(BlockVariant::Plain2d), seed)?.cast::<f64>();
    let mut tea_spec = NetworkSpec::toy(BlockVariant::Tea);
    tea_spec.flavor = TemporalFlavor::Cw;
    let tea = Network::<f32>::build(&tea_spec, seed)?.cast::<f64>();
    let dp = video(&plain, &x)?.max_abs_diff(&video(&plain, &rev)?)?;
    let dt = video(&tea, &x)?.max_abs_diff(&video(&tea, &rev)?)?;
    Ok((dp <= 1e-12 && dt > 1e-6, format!("plain {dp:e}, tea {dt:e}")))
}

/// A single stage of two MTA-only blocks on the toy input.
pub fn stacked_mta_spec() -> NetworkSpec {
    let mut spec = NetworkSpec::toy(BlockVariant::MtaOnly);
    spec.flavor = TemporalFlavor::Cw;
    spec.stages = vec![StageSpec {
        blocks: 2,
        bottleneck: 8,
        out_channels: 16,
        stride: 1,
    }];
    spec
}

fn stacked_radius(seed: u64) -> Result<(bool, String)> {
    let spec = stacked_mta_spec().with_input(15, 16, 16);
    let net = Network::<f32>::build(&spec, seed)?.cast::<f64>();
    let e = probe_network_extent(&net, 15, seed)?;
    Ok((e.radius == 6, format!("probed radius {}", e.radius)))
}

/// Widths of the block used for whole-block gradient checks.
pub fn small_tea_block(seed: u64) -> Result<Block<f64>> {
    let spec = BlockSpec {
        variant: BlockVariant::Tea,
        flavor: TemporalFlavor::Cw,
        in_channels: 8,
        bottleneck: 8,
        out_channels: 8,
        stride: 1,
        reduction: 4,
        me_batch_norm: false,
    };
    let mut r = rng(seed, 24);
    let mut b = Block::<f64>::new(spec, &mut r)?;
    for p in b.params_mut() {
        if p.name.ends_with("bias") || p.name.contains("conv_trans") || p.name.contains("bn.") {
            let base = if p.name.ends_with("bn.weight") { 1.0 } else { 0.0 };
            p.value = Tensor::randn(p.value.shape(), 0.3, &mut r).map(|v| v + base);
        }
    }
    Ok(b)
}

fn tea_block_gradients(seed: u64) -> Result<(bool, String)> {
    let b = small_tea_block(seed)?;
    let x = Tensor::<f64>::randn(&[2, 3, 8, 3, 3], 1.0, &mut rng(seed, 25));
    let wts = weights_for(x.shape(), seed, 26);
    let rep = grad_check_module(&b, &[x], FD_STEP, |m, tp, v| {
        let y = m.forward(tp, v[0], RunOpts::train())?;
        tp.weighted_sum(y, &wts)
    })?;
    Ok(grad_verdict(rep.max_rel_error, "TEA block"))
}

fn flops_match_reference(_: u64) -> Result<(bool, String)> {
    let plain = count_flops(&NetworkSpec::resnet50_2d(), 8, 224, 224)?.totals.macs as f64;
    let tea = count_flops(&NetworkSpec::resnet50_tea(), 8, 224, 224)?.totals.macs as f64;
    let ratio = tea / plain;
    let ok = (plain / 33e9 - 1.0).abs() <= 0.1 && (tea / 35e9 - 1.0).abs() <= 0.1 && (1.03..=1.10).contains(&ratio);
    Ok((ok, format!("2d {:.2}G, tea {:.2}G, ratio {ratio:.3}", plain / 1e9, tea / 1e9)))
}

fn analytic_rf_matches_probe(seed: u64) -> Result<(bool, String)> {
    for v in BlockVariant::ALL {
        let mut spec = NetworkSpec::toy(v);
        spec.flavor = TemporalFlavor::Cw;
        let rf = temporal_rf(&spec)?.cumulative;
        let frames = 2 * rf.past.max(rf.future) + 3;
        let spec = spec.with_input(frames, 16, 16);
        let net = Network::<f32>::build(&spec, seed)?.cast::<f64>();
        let probed = probe_network_extent(&net, frames, seed)?;
        if probed != rf {
            return Ok((false, format!("{v:?}: analytic {rf:?}, probed {probed:?}")));
        }
    }
    Ok((true, format!("{} toy variants", BlockVariant::ALL.len())))
}

fn counts_are_shape_driven(seed: u64) -> Result<(bool, String)> {
    let spec = NetworkSpec::toy(BlockVariant::Tea);
    let a = Network::<f32>::build(&spec, seed)?.num_params();
    let b = Network::<f32>::build(&spec, seed.wrapping_add(1))?.num_params();
    let counted = count_params(&spec)?.total as usize;
    Ok((a == counted && b == counted, format!("{counted} parameters")))
}

fn generation_is_reproducible(seed: u64) -> Result<(bool, String)> {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let a = generate_dataset(&spec, 2, 0)?;
    let b = generate_dataset(&spec, 2, 0)?;
    let same_clips = a == b;
    let mode = SampleMode::Train { seed };
    let same_idx = sample_indices(32, 8, mode)? == sample_indices(32, 8, mode)?;
    Ok((same_clips && same_idx, "8 clips and train-mode indices".into()))
}

fn segments_partition_clip(_: u64) -> Result<(bool, String)> {
    for raw in 1..=40 {
        for t in 1..=raw {
            let segs = segment_bounds(raw, t);
            let contiguous = segs.windows(2).all(|w| w[0].1 == w[1].0);
            let covers = segs.first().map(|s| s.0) == Some(0) && segs.last().map(|s| s.1) == Some(raw);
            let sizes: Vec<usize> = segs.iter().map(|(a, b)| b - a).collect();
            let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
            if !(contiguous && covers && spread <= 1) {
                return Ok((false, format!("T_raw={raw}, T={t}: {segs:?}")));
            }
        }
    }
    Ok((true, "T_raw 1..=40, T 1..=T_raw".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = CHECKS.iter().map(|c| c.1).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), CHECKS.len());
    }

    #[test]
    fn reverse_time_is_an_involution() {
        let x = Tensor::<f32>::randn(&[2, 3, 2, 2, 1], 1.0, &mut rng(0, 0));
        assert_eq!(reverse_time(&reverse_time(&x).unwrap()).unwrap(), x);
    }
}
