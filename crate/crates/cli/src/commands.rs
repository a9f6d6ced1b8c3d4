use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Map, Value};
use tea_core::analyzer::analyze;
use tea_core::checkpoint::{load_checkpoint, save_checkpoint};
use tea_core::data::{generate_dataset_parallel, load_manifest, write_dataset, SyntheticSpec};
use tea_core::network::NetworkSpec;
use tea_core::selfcheck;
use tea_core::shift::equivalence_sweep;
use tea_core::train::{evaluate_parallel, train_with, ToyVariant, TrainConfig};

use crate::{Cli, Command};

pub enum Outcome {
    Passed,
    Failed,
}

pub const DATASET_FILE: &str = "dataset.json";
pub const TRAIN_MANIFEST: &str = "train.json";
pub const VAL_MANIFEST: &str = "val.json";

pub fn run(cli: &Cli) -> Result<Outcome> {
    let (report, outcome) = match &cli.command {
        Command::Analyze { spec, preset, frames, size } => analyze_cmd(cli.seed, spec.as_deref(), preset.as_deref(), *frames, *size)?,
        Command::Equivalence { channels, frames, cases } => equivalence_cmd(cli.seed, channels, frames, *cases)?,
        Command::Selfcheck { inject_fault } => selfcheck_cmd(cli.seed, *inject_fault)?,
        Command::TrainToy {
            variant,
            epochs,
            batch_size,
            lr,
            data,
            out_dir,
            workers,
        } => {
            let mut cfg = TrainConfig::new(ToyVariant::parse(variant)?, cli.seed);
            cfg.epochs = *epochs;
            cfg.batch_size = *batch_size;
            cfg.learning_rate = *lr;
            let out_dir = out_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(format!("{variant}-seed{}", cli.seed)));
            train_cmd(cfg, data.as_deref(), &out_dir, *workers)?
        }
        Command::Eval {
            checkpoint,
            manifest,
            batch_size,
            workers,
        } => eval_cmd(cli.seed, checkpoint, manifest, *batch_size, *workers)?,
        Command::GenData {
            out_dir,
            spec,
            train_per_class,
            val_per_class,
            workers,
        } => gen_data_cmd(cli.seed, out_dir, spec.as_deref(), *train_per_class, *val_per_class, *workers)?,
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = &cli.out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(outcome)
}

fn echo_config(config: &Value) {
    eprintln!("config: {config}");
}

fn report(command: &str, seed: u64, config: Value, body: Value) -> Value {
    let mut m = Map::new();
    m.insert("command".into(), command.into());
    m.insert("seed".into(), seed.into());
    m.insert("config".into(), config);
    if let Value::Object(b) = body {
        m.extend(b);
    }
    Value::Object(m)
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn analyze_cmd(seed: u64, spec_file: Option<&Path>, preset: Option<&str>, frames: Option<usize>, size: Option<usize>) -> Result<(Value, Outcome)> {
    let spec = match (spec_file, preset) {
        (Some(p), _) => {
            let spec: NetworkSpec =
                serde_json::from_value(read_json(p)?).with_context(|| format!("{} is not a network spec", p.display()))?;
            spec
        }
        (None, Some(name)) => NetworkSpec::preset(name)?,
        (None, None) => bail!("give a spec file or --preset"),
    };
    let t = frames.unwrap_or(spec.input.frames);
    let (h, w) = size.map_or((spec.input.height, spec.input.width), |s| (s, s));
    let config = json!({
        "spec_file": spec_file,
        "preset": preset,
        "frames": t,
        "height": h,
        "width": w,
        "spec": spec,
    });
    echo_config(&config);
    let rep = analyze(&spec, t, h, w).with_context(|| format!("invalid spec {:?}", spec.name))?;
    let mut body = serde_json::to_value(rep)?;
    body["name"] = spec.name.clone().into();
    Ok((report("analyze", seed, config, body), Outcome::Passed))
}

fn equivalence_cmd(seed: u64, channels: &[usize], frames: &[usize], cases: usize) -> Result<(Value, Outcome)> {
    if let Some(c) = channels.iter().find(|&&c| c == 0 || c % 8 != 0) {
        bail!("--channels {c}: channel count must be a positive multiple of 8 so the shift bands are whole");
    }
    if frames.contains(&0) {
        bail!("--frames must be positive");
    }
    let config = json!({ "channels": channels, "frames": frames, "cases": cases });
    echo_config(&config);
    let rep = equivalence_sweep(channels, frames, cases, seed)?;
    let passed = rep.max_abs_diff == 0.0;
    eprintln!("max |shift - conv| = {:e} over {} shapes", rep.max_abs_diff, rep.cases);
    let body = json!({
        "cases": rep.cases,
        "max_abs_diff": rep.max_abs_diff,
        "worst_shape": rep.worst_shape,
        "passed": passed,
    });
    Ok((report("equivalence", seed, config, body), if passed { Outcome::Passed } else { Outcome::Failed }))
}

fn selfcheck_cmd(seed: u64, inject_fault: bool) -> Result<(Value, Outcome)> {
    let config = json!({ "inject_fault": inject_fault });
    echo_config(&config);
    let rep = selfcheck::run(seed, inject_fault);
    for p in rep.properties.iter().filter(|p| !p.passed) {
        eprintln!("FAILED {}::{}: {}", p.module, p.name, p.detail);
    }
    eprintln!("{} passed, {} failed", rep.passed, rep.failed);
    let outcome = if rep.all_passed() { Outcome::Passed } else { Outcome::Failed };
    let mut body = serde_json::to_value(&rep)?;
    body.as_object_mut().expect("report is an object").remove("seed");
    Ok((report("selfcheck", seed, config, body), outcome))
}

/// Contents of `dataset.json`, written by `gen-data`.
fn dataset_record(spec: &SyntheticSpec, train_per_class: usize, val_per_class: usize) -> Value {
    json!({
        "synthetic": spec,
        "train_per_class": train_per_class,
        "val_per_class": val_per_class,
        "train_manifest": TRAIN_MANIFEST,
        "val_manifest": VAL_MANIFEST,
    })
}

fn train_cmd(mut cfg: TrainConfig, data: Option<&Path>, out_dir: &Path, workers: usize) -> Result<(Value, Outcome)> {
    let (tr, va) = match data {
        Some(dir) => {
            let rec = read_json(&dir.join(DATASET_FILE))?;
            cfg.data = serde_json::from_value(rec["synthetic"].clone()).context("dataset.json: bad synthetic spec")?;
            cfg.train_per_class = rec["train_per_class"].as_u64().context("dataset.json: train_per_class")? as usize;
            cfg.val_per_class = rec["val_per_class"].as_u64().context("dataset.json: val_per_class")? as usize;
            (load_manifest(&dir.join(TRAIN_MANIFEST))?, load_manifest(&dir.join(VAL_MANIFEST))?)
        }
        None => (
            generate_dataset_parallel(&cfg.data, cfg.train_per_class, 0, workers)?,
            generate_dataset_parallel(&cfg.data, cfg.val_per_class, (4 * cfg.train_per_class) as u64, workers)?,
        ),
    };
    let config = json!({
        "train": cfg,
        "data_dir": data,
        "out_dir": out_dir,
        "workers": workers,
    });
    echo_config(&config);
    let outcome = train_with(&cfg, &tr, &va, |e| {
        eprintln!("epoch {:>3}  loss {:.4}  train acc {:.3}", e.epoch, e.loss, e.train_accuracy);
    })?;
    let mut net = outcome.network;
    eprintln!("val accuracy {:.4}", outcome.val_accuracy);

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ckpt = out_dir.join("model.tean");
    save_checkpoint(&ckpt, &mut net)?;
    let body = json!({
        "variant": cfg.variant.name(),
        "history": outcome.history,
        "val_accuracy": outcome.val_accuracy,
        "train_clips": tr.len(),
        "val_clips": va.len(),
        "checkpoint": ckpt,
    });
    let rep = report("train-toy", cfg.seed, config, body);
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&rep)?)?;
    Ok((rep, Outcome::Passed))
}

fn eval_cmd(seed: u64, checkpoint: &Path, manifest: &Path, batch_size: usize, workers: usize) -> Result<(Value, Outcome)> {
    if batch_size == 0 {
        bail!("--batch-size must be positive");
    }
    let config = json!({
        "checkpoint": checkpoint,
        "manifest": manifest,
        "batch_size": batch_size,
        "workers": workers,
    });
    echo_config(&config);
    let net = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let clips = load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let frames = net.spec().input.frames;
    let accuracy = evaluate_parallel(&net, &clips, frames, batch_size, workers)?;
    let body = json!({
        "network": net.spec().name,
        "variant": net.spec().variant,
        "frames": frames,
        "clips": clips.len(),
        "accuracy": accuracy,
    });
    Ok((report("eval", seed, config, body), Outcome::Passed))
}

fn gen_data_cmd(
    seed: u64,
    out_dir: &Path,
    spec_file: Option<&Path>,
    train_per_class: usize,
    val_per_class: usize,
    workers: usize,
) -> Result<(Value, Outcome)> {
    // Fields in the spec file override the defaults, including the seed.
    let mut merged = serde_json::to_value(SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })?;
    if let Some(p) = spec_file {
        let Value::Object(fields) = read_json(p)? else {
            bail!("{} must hold a JSON object", p.display());
        };
        for (k, v) in fields {
            if merged.get(&k).is_none() {
                bail!("{}: unknown field {k:?}", p.display());
            }
            merged[k] = v;
        }
    }
    let spec: SyntheticSpec = serde_json::from_value(merged).context("invalid synthetic spec")?;
    spec.validate()?;
    if train_per_class == 0 || val_per_class == 0 {
        bail!("each split needs at least one clip per class");
    }
    let config = json!({
        "out_dir": out_dir,
        "spec_file": spec_file,
        "workers": workers,
        "dataset": dataset_record(&spec, train_per_class, val_per_class),
    });
    echo_config(&config);
    // Same ids as the trainer's in-memory splits.
    let tr = generate_dataset_parallel(&spec, train_per_class, 0, workers)?;
    let va = generate_dataset_parallel(&spec, val_per_class, (4 * train_per_class) as u64, workers)?;
    write_dataset(out_dir, TRAIN_MANIFEST, &tr)?;
    write_dataset(out_dir, VAL_MANIFEST, &va)?;
    let record = dataset_record(&spec, train_per_class, val_per_class);
    fs::write(out_dir.join(DATASET_FILE), serde_json::to_string_pretty(&record)?)?;
    let body = json!({
        "out_dir": out_dir,
        "synthetic": spec,
        "train_clips": tr.len(),
        "val_clips": va.len(),
    });
    Ok((report("gen-data", spec.seed, config, body), Outcome::Passed))
}
