//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Built with `harness = false` so the lines reach the terminal.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tea_core::analyzer::{count_flops, temporal_rf};
use tea_core::block::{Block, BlockVariant};
use tea_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, state_dict};
use tea_core::data::{decode_clip, encode_clip, generate_dataset, read_clip, write_clip, SyntheticSpec};
use tea_core::gradcheck::grad_check_module;
use tea_core::kernel::{ConvGeometry, ConvKernel};
use tea_core::me::{MotionExcitation, SqueezeExcite};
use tea_core::mta::{mta_param_count, probe_temporal_rf, Aggregation, Mta, RunOpts};
use tea_core::network::{probe_network_extent, Network, NetworkSpec};
use tea_core::shift::{equivalence_sweep, shift_bands, TemporalFlavor};
use tea_core::train::{make_splits, train, ToyVariant, TrainConfig};
use tea_core::{Error, Mode, Module, Tape, Tensor, Var};

type Verdict = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn run<T>(r: tea_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn eval(x: &Tensor<f64>, f: impl FnOnce(&mut Tape<f64>, Var) -> tea_core::Result<Var>) -> Result<Tensor<f64>, String> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let y = run(f(&mut tape, v))?;
    Ok(tape.value(y).clone())
}

fn within(started: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    if took < limit {
        Ok(())
    } else {
        Err(format!("{what} took {took:.1?}, limit {limit:?}"))
    }
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let frames: Vec<usize> = (1..=8).collect();
    let rep = run(equivalence_sweep(&[8, 16, 64], &frames, 120, 2024))?;
    within(started, Duration::from_secs(10), "sweep")?;
    if rep.cases < 100 || rep.max_abs_diff != 0.0 {
        return Err(format!("{} shapes, max |diff| {:e} at {:?}", rep.cases, rep.max_abs_diff, rep.worst_shape));
    }
    Ok(format!("{} shapes, max |diff| = 0, {:.2?}", rep.cases, started.elapsed()))
}

fn criterion_2() -> Verdict {
    let started = Instant::now();
    let plain = run(count_flops(&NetworkSpec::resnet50_2d(), 8, 224, 224))?.totals.macs as f64;
    let tea = run(count_flops(&NetworkSpec::resnet50_tea(), 8, 224, 224))?.totals.macs as f64;
    within(started, Duration::from_secs(5), "counting")?;
    let ratio = tea / plain;
    let line = format!("2D {:.2}G, TEA {:.2}G, ratio {ratio:.3}", plain / 1e9, tea / 1e9);
    let ok = (plain / 33e9 - 1.0).abs() <= 0.10 && (tea / 35e9 - 1.0).abs() <= 0.10 && (1.03..=1.10).contains(&ratio);
    if ok {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_3() -> Verdict {
    for seed in 0..5 {
        let m = run(Mta::<f64>::random(8, Aggregation::Hierarchical, 1.0, &mut rng(300 + seed)))?;
        let radii = run(probe_temporal_rf(&m, 9))?;
        if radii != [0, 1, 2, 3] {
            return Err(format!("seed {seed}: radii {radii:?}"));
        }
    }
    for v in BlockVariant::ALL {
        let mut spec = NetworkSpec::toy(v);
        spec.flavor = TemporalFlavor::Cw;
        let rf = run(temporal_rf(&spec))?.cumulative;
        let frames = 2 * rf.past.max(rf.future) + 3;
        let spec = spec.with_input(frames, 16, 16);
        let net = run(Network::<f32>::build(&spec, 31))?.cast::<f64>();
        let probed = run(probe_network_extent(&net, frames, 31))?;
        if probed != rf {
            return Err(format!("{v:?}: analytic {rf:?}, probed {probed:?}"));
        }
    }
    Ok(format!("radii (0,1,2,3) on 5 seeds; analytic = probe on {} toy specs", BlockVariant::ALL.len()))
}

fn criterion_4() -> Verdict {
    let mut g = rng(4);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut identity_cases = 0;
    for i in 0..1000 {
        let (c, r) = [(8, 2), (8, 4), (16, 4), (4, 1)][i % 4];
        let mut me = run(MotionExcitation::<f64>::new(c, r, false, &mut g))?;
        for p in me.params_mut() {
            if p.name.ends_with("bias") || p.name.starts_with("conv_trans") {
                p.value = Tensor::randn(p.value.shape(), 0.5, &mut g);
            }
        }
        let t = g.gen_range(1..=6);
        let x = Tensor::<f64>::randn(&[1, t, c, 3, 3], 1.0, &mut g);
        let a = eval(&x, |tp, v| me.attention(tp, v, Mode::Eval))?;
        for &v in a.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if i % 10 == 0 {
            me.zero_excitation();
            let y = eval(&x, |tp, v| me.forward(tp, v, Mode::Eval))?;
            if y.data().iter().zip(x.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return Err(format!("evaluation {i}: zeroed excitation is not the identity"));
            }
            identity_cases += 1;
        }
    }
    let line = format!("identity bit-exact on {identity_cases} modules; A in [{lo:.6}, {hi:.6}] over 1000 evaluations");
    if lo > -1.0 && hi < 1.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_5() -> Verdict {
    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-5;
    let started = Instant::now();
    let mut g = rng(5);
    let mut results = Vec::new();

    let mut me = run(MotionExcitation::<f64>::new(8, 4, false, &mut g))?;
    for p in me.params_mut() {
        if p.name.ends_with("bias") || p.name.starts_with("conv_trans") {
            p.value = Tensor::randn(p.value.shape(), 0.5, &mut g);
        }
    }
    let x = Tensor::<f64>::randn(&[2, 3, 8, 3, 3], 1.0, &mut g);
    let w = Tensor::<f64>::randn(x.shape(), 1.0, &mut g);
    let rep = run(grad_check_module(&me, &[x], STEP, |m, tp, v| {
        let y = m.forward(tp, v[0], Mode::Train)?;
        tp.weighted_sum(y, &w)
    }))?;
    results.push(("ME", rep.max_rel_error));

    let m = run(Mta::<f64>::random(8, Aggregation::Hierarchical, 0.7, &mut g))?;
    let x = Tensor::<f64>::randn(&[2, 3, 8, 3, 3], 1.0, &mut g);
    let w = Tensor::<f64>::randn(x.shape(), 1.0, &mut g);
    let rep = run(grad_check_module(&m, &[x], STEP, |m, tp, v| {
        let y = m.forward(tp, v[0], RunOpts::train())?;
        tp.weighted_sum(y, &w)
    }))?;
    results.push(("MTA", rep.max_rel_error));

    let mut se = run(SqueezeExcite::<f64>::new(8, 4, &mut g))?;
    for p in se.params_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.7, &mut g);
    }
    let x = Tensor::<f64>::randn(&[2, 3, 8, 3, 3], 1.0, &mut g);
    let w = Tensor::<f64>::randn(x.shape(), 1.0, &mut g);
    let rep = run(grad_check_module(&se, &[x], STEP, |m, tp, v| {
        let y = m.forward(tp, v[0])?;
        tp.weighted_sum(y, &w)
    }))?;
    results.push(("SE", rep.max_rel_error));

    // First block of the toy TEA network, with its shift initialisation blurred.
    let (_, spec) = NetworkSpec::toy(BlockVariant::Tea).block_specs()[0].clone();
    let mut b = run(Block::<f64>::new(spec, &mut g))?;
    for p in b.params_mut() {
        if p.name.contains("temporal") || p.name.ends_with("bias") || p.name.contains("conv_trans") {
            let noise = Tensor::<f64>::randn(p.value.shape(), 0.3, &mut g);
            p.value = Tensor::new(p.value.shape(), p.value.data().iter().zip(noise.data()).map(|(a, n)| 0.8 * a + n).collect())
                .map_err(|e| e.to_string())?;
        }
    }
    let c = spec.in_channels;
    let x = Tensor::<f64>::randn(&[2, 3, c, 4, 4], 1.0, &mut g);
    let y_shape = eval(&x, |tp, v| b.forward(tp, v, RunOpts::train()))?.shape().to_vec();
    let w = Tensor::<f64>::randn(&y_shape, 1.0, &mut g);
    let rep = run(grad_check_module(&b, &[x], STEP, |m, tp, v| {
        let y = m.forward(tp, v[0], RunOpts::train())?;
        tp.weighted_sum(y, &w)
    }))?;
    results.push(("toy TEA block", rep.max_rel_error));

    within(started, Duration::from_secs(120), "gradient checks")?;
    let line = results.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect::<Vec<_>>().join(", ");
    if results.iter().all(|&(_, e)| e < TOL) {
        Ok(format!("{line}; {:.1?}", started.elapsed()))
    } else {
        Err(line)
    }
}

fn criterion_6() -> Verdict {
    const TOL: f64 = 1e-5;
    let mut g = rng(6);
    let mut worst = 0.0f64;
    let mut note = |what: &str, d: f64| -> Result<(), String> {
        worst = worst.max(d);
        if d < TOL {
            Ok(())
        } else {
            Err(format!("{what}: max |diff| {d:e}"))
        }
    };
    for _ in 0..20 {
        let [n, t, h, w] = [g.gen_range(1..=2), g.gen_range(1..=6), g.gen_range(1..=7), g.gen_range(1..=7)];
        let (groups, ipg, opg) = (g.gen_range(1..=2), g.gen_range(1..=3), g.gen_range(1..=3));
        let geom = ConvGeometry {
            groups,
            ..ConvGeometry::spatial(groups * ipg, groups * opg, [1, 3, 5][g.gen_range(0..3)], g.gen_range(1..=2))
        };
        let k = run(ConvKernel::<f64>::randn(geom, true, 1.0, &mut g))?;
        let x = Tensor::<f64>::randn(&[n, t, groups * ipg, h, w], 1.0, &mut g);
        note("conv", eval(&x, |tp, v| tp.conv2d(v, &k))?.max_abs_diff(&kconv(&x, &k)).unwrap())?;

        let c = groups * ipg;
        let tk = run(ConvKernel::<f64>::randn(ConvGeometry::temporal_cw(c, 3), false, 1.0, &mut g))?;
        note("temporal conv", eval(&x, |tp, v| tp.temporal_conv1d_cw(v, &tk))?.max_abs_diff(&naive_temporal(&x, &taps(&tk))).unwrap())?;

        let y = Tensor::<f64>::randn(x.shape(), 1.0, &mut g);
        let got = {
            let mut tp = Tape::new();
            let (a, b) = (tp.leaf(x.clone(), false), tp.leaf(y.clone(), false));
            let s = run(tp.add(a, b))?;
            let r = run(tp.relu(s))?;
            tp.value(r).clone()
        };
        note("add/relu", got.max_abs_diff(&naive_relu(&naive_add(&x, &y))).unwrap())?;
        note("pool", eval(&x, |tp, v| tp.global_avg_pool_spatial(v))?.max_abs_diff(&naive_pool(&x)).unwrap())?;
        if h >= 2 && w >= 2 {
            note("max pool", eval(&x, |tp, v| tp.max_pool(v, 3, 2, 1))?.max_abs_diff(&naive_max_pool(&x, 3, 2, 1)).unwrap())?;
        }
        note("subsample", eval(&x, |tp, v| tp.subsample(v, 2))?.max_abs_diff(&naive_subsample(&x, 2)).unwrap())?;
    }
    for c in [8, 16] {
        let x = Tensor::<f64>::randn(&[2, 5, c, 3, 3], 1.0, &mut g);
        let (l, r) = shift_bands(c);
        note("shift bands", eval(&x, |tp, v| tp.shift_bands(v, l, r))?.max_abs_diff(&shift_bands_oracle(&x, l, r)).unwrap())?;
    }
    for (i, (c, red)) in [(8, 2), (8, 4), (16, 4), (4, 1), (16, 16)].into_iter().enumerate() {
        let mut me = run(MotionExcitation::<f64>::new(c, red, false, &mut g))?;
        for p in me.params_mut() {
            p.value = Tensor::randn(p.value.shape(), 0.6, &mut g);
        }
        let x = Tensor::<f64>::randn(&[2, 1 + i, c, 5, 4], 1.0, &mut g);
        let (_, out) = me_oracle(&x, &me_weights(&me));
        note("me_forward", eval(&x, |tp, v| me.forward(tp, v, Mode::Eval))?.max_abs_diff(&out).unwrap())?;

        let mut se = run(SqueezeExcite::<f64>::new(c, red, &mut g))?;
        for p in se.params_mut() {
            p.value = Tensor::randn(p.value.shape(), 0.8, &mut g);
        }
        let (_, out) = se_oracle(&se, &x);
        note("se_forward", eval(&x, |tp, v| se.forward(tp, v))?.max_abs_diff(&out).unwrap())?;
    }
    for (i, c) in [4, 8, 12, 16].into_iter().enumerate() {
        let m = run(Mta::<f64>::random(c, Aggregation::Hierarchical, 0.8, &mut g))?;
        let x = Tensor::<f64>::randn(&[1, 2 + i, c, 6, 5], 1.0, &mut g);
        let temps: Vec<_> = m.temporal.iter().map(|t| taps(&t.kernel)).collect();
        let spats: Vec<_> = m.spatial.iter().map(|k| k.weight.value.data().to_vec()).collect();
        note("mta_forward", eval(&x, |tp, v| m.forward(tp, v, RunOpts::eval()))?.max_abs_diff(&mta_oracle(&x, &temps, &spats, 1)).unwrap())?;
    }
    for v in BlockVariant::ALL {
        let spec = tea_core::block::BlockSpec {
            variant: v,
            flavor: TemporalFlavor::Cw,
            in_channels: 8,
            bottleneck: 8,
            out_channels: 16,
            stride: 2,
            reduction: 4,
            me_batch_norm: false,
        };
        let mut b = run(Block::<f64>::new(spec, &mut g))?;
        for p in b.params_mut() {
            if p.name.ends_with("bias") || p.name.contains("conv_trans") {
                p.value = Tensor::randn(p.value.shape(), 0.3, &mut g);
            }
        }
        let x = Tensor::<f64>::randn(&[1, 4, 8, 5, 5], 1.0, &mut g);
        note("block", eval(&x, |tp, xv| b.forward(tp, xv, RunOpts::eval()))?.max_abs_diff(&block_oracle(&b, &x)).unwrap())?;
    }
    Ok(format!("ops, ME, SE, MTA and 8 block variants; worst |diff| {worst:.1e}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_7() -> Verdict {
    let acc = |variant: ToyVariant| -> Result<Vec<f64>, String> {
        let mut out = Vec::new();
        for seed in 0..3 {
            let cfg = TrainConfig::new(variant, seed);
            let started = Instant::now();
            let (tr, va) = run(make_splits(&cfg))?;
            let res = run(train(&cfg, &tr, &va))?;
            within(started, Duration::from_secs(300), &format!("{} seed {seed}", variant.name()))?;
            println!("    {:<10} seed {seed}: val {:.3} ({:.0?})", variant.name(), res.val_accuracy, started.elapsed());
            out.push(res.val_accuracy);
        }
        Ok(out)
    };
    let tea = median(acc(ToyVariant::Tea)?);
    let plain = median(acc(ToyVariant::Plain2d)?);
    let shift = median(acc(ToyVariant::P21dShift)?);
    let line = format!("median val: tea {tea:.3}, plain2d {plain:.3}, p21d-shift {shift:.3}");
    if tea >= 0.90 && plain <= 0.35 && shift >= plain + 0.30 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_8() -> Verdict {
    for c in (4..=512).step_by(4) {
        let mta = mta_param_count(c, false);
        let conv = ConvGeometry::spatial(c, c, 3, 1).num_params(false) as usize;
        if mta >= conv {
            return Err(format!("C={c}: MTA {mta} >= conv {conv}"));
        }
    }
    for c in [4, 64, 512] {
        let m = run(Mta::<f32>::new(c, 1, Aggregation::Hierarchical, TemporalFlavor::Cw, false, &mut rng(8)))?;
        if m.num_params() != mta_param_count(c, false) {
            return Err(format!("C={c}: built module has {} parameters", m.num_params()));
        }
    }
    Ok("MTA(C) < 3x3 conv for C = 4, 8, ..., 512".into())
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec {
        seed: 9,
        ..SyntheticSpec::default()
    };
    let clips = run(generate_dataset(&spec, 2, 0))?;
    for c in &clips {
        let p = dir.path().join("clip.teac");
        run(write_clip(&p, c))?;
        let back = run(read_clip(&p, c.clip_id))?;
        if back.label != c.label || back.frames.data().iter().zip(c.frames.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("clip {} changed in a round trip", c.clip_id));
        }
    }
    let mut net = run(Network::<f32>::build(&NetworkSpec::toy(BlockVariant::Tea), 9))?;
    for p in net.params_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.2, &mut rng(9));
    }
    let p = dir.path().join("net.tean");
    run(save_checkpoint(&p, &mut net))?;
    let mut back = run(load_checkpoint(&p))?;
    let (a, b) = (state_dict(&mut net), state_dict(&mut back));
    let same = a.len() == b.len()
        && a.iter().all(|(k, t)| b.get(k).is_some_and(|u| t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits())));
    if !same {
        return Err("checkpoint state changed in a round trip".into());
    }

    let clip = run(encode_clip(&clips[0]))?;
    let ckpt = run(encode_checkpoint(&mut net))?;
    let mut checked = 0;
    let mut expect = |what: &str, r: Result<(), Error>, ok: fn(&Error) -> bool| -> Result<(), String> {
        checked += 1;
        match r {
            Err(e) if ok(&e) => Ok(()),
            Err(e) => Err(format!("{what}: unexpected error {e}")),
            Ok(()) => Err(format!("{what}: parsed")),
        }
    };
    let clip_r = |b: &[u8]| decode_clip(b, 0).map(|_| ());
    let ckpt_r = |b: &[u8]| decode_checkpoint(b).map(|_| ());
    let mut bad = clip.clone();
    bad[0] ^= 1;
    expect("clip magic", clip_r(&bad), |e| matches!(e, Error::BadMagic { .. }))?;
    let mut bad = clip.clone();
    bad[4] = 7;
    expect("clip version", clip_r(&bad), |e| matches!(e, Error::VersionMismatch { .. }))?;
    for cut in (0..clip.len()).step_by(97) {
        expect("clip prefix", clip_r(&clip[..cut]), |e| matches!(e, Error::Truncated { .. }))?;
    }
    let mut bad = ckpt.clone();
    bad[1] ^= 1;
    expect("checkpoint magic", ckpt_r(&bad), |e| matches!(e, Error::BadMagic { .. }))?;
    let mut bad = ckpt.clone();
    bad[4] = 7;
    expect("checkpoint version", ckpt_r(&bad), |e| matches!(e, Error::VersionMismatch { .. }))?;
    for i in (8..ckpt.len()).step_by(101) {
        let mut bad = ckpt.clone();
        bad[i] ^= 0x10;
        expect("checkpoint byte", ckpt_r(&bad), |e| matches!(e, Error::DigestMismatch { .. }))?;
    }
    for cut in (0..ckpt.len()).step_by(211) {
        expect("checkpoint prefix", ckpt_r(&ckpt[..cut]), |e| {
            matches!(e, Error::Truncated { .. } | Error::DigestMismatch { .. })
        })?;
    }
    Ok(format!("{} clips and a checkpoint bit-exact; {checked} corruptions rejected", clips.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("shift/conv equivalence", criterion_1),
        ("FLOPs reproduction", criterion_2),
        ("receptive fields", criterion_3),
        ("ME identity and range", criterion_4),
        ("gradient checks", criterion_5),
        ("oracle equivalence", criterion_6),
        ("temporal modelling", criterion_7),
        ("MTA parameter economy", criterion_8),
        ("format round trips", criterion_9),
    ];
    // `ACCEPTANCE_ONLY=3,5` runs a subset; the default is every criterion.
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let (mut ran, mut failed) = (0, 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        match check() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
