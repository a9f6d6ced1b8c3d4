//! Toy-scale training and evaluation on synthetic motion clips.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::BlockVariant;
use crate::data::{generate_dataset, sparse_sample, ClipRecord, SampleMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mta::RunOpts;
use crate::network::{Network, NetworkSpec};
use crate::optim::{cosine_lr, SgdState};
use crate::param::Module;
use crate::shift::TemporalFlavor;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Named toy variants accepted by the trainer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyVariant {
    Tea,
    Plain2d,
    P21dShift,
    MeOnly,
    MtaOnly,
    MeNoRes,
}

impl ToyVariant {
    pub const ALL: [ToyVariant; 6] = [
        ToyVariant::Tea,
        ToyVariant::Plain2d,
        ToyVariant::P21dShift,
        ToyVariant::MeOnly,
        ToyVariant::MtaOnly,
        ToyVariant::MeNoRes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToyVariant::Tea => "tea",
            ToyVariant::Plain2d => "plain2d",
            ToyVariant::P21dShift => "p21d-shift",
            ToyVariant::MeOnly => "me-only",
            ToyVariant::MtaOnly => "mta-only",
            ToyVariant::MeNoRes => "me-no-res",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn block(self) -> BlockVariant {
        match self {
            ToyVariant::Tea => BlockVariant::Tea,
            ToyVariant::Plain2d => BlockVariant::Plain2d,
            ToyVariant::P21dShift => BlockVariant::P21dResnet,
            ToyVariant::MeOnly => BlockVariant::MeOnly,
            ToyVariant::MtaOnly => BlockVariant::MtaOnly,
            ToyVariant::MeNoRes => BlockVariant::MeNoResidual,
        }
    }

    pub fn spec(self) -> NetworkSpec {
        let mut s = NetworkSpec::toy(self.block());
        s.flavor = TemporalFlavor::ShiftInit;
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: ToyVariant,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub frames: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub data: SyntheticSpec,
}

impl TrainConfig {
    pub fn new(variant: ToyVariant, seed: u64) -> Self {
        TrainConfig {
            variant,
            seed,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            frames: 8,
            train_per_class: 125,
            val_per_class: 50,
            data: SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            },
        }
    }

    pub fn spec(&self) -> NetworkSpec {
        let mut s = self.variant.spec();
        s.input.frames = self.frames;
        s.input.height = self.data.height;
        s.input.width = self.data.width;
        s
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.frames == 0 {
            return Err(Error::Config("batch size and frame count must be positive".into()));
        }
        self.data.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub val_accuracy: f64,
    pub network: Network<f32>,
}

/// Train clips take ids `0..4 * train_per_class`; validation clips follow.
pub fn make_splits(cfg: &TrainConfig) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    let train = generate_dataset(&cfg.data, cfg.train_per_class, 0)?;
    let val = generate_dataset(&cfg.data, cfg.val_per_class, (4 * cfg.train_per_class) as u64)?;
    Ok((train, val))
}

fn stack(clips: &[&ClipRecord], frames: usize, mode: impl Fn(&ClipRecord) -> SampleMode) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for c in clips {
        let s = sparse_sample(c, frames, mode(c))?;
        shape = s.shape().to_vec();
        data.extend(s.into_data());
    }
    shape.insert(0, clips.len());
    Tensor::new(&shape, data)
}

fn sample_seed(seed: u64, epoch: usize, clip_id: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 40) ^ clip_id
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn count_correct(net: &Network<f32>, clips: &[ClipRecord], frames: usize, batch_size: usize) -> Result<usize> {
    let k = net.spec().classes;
    let mut correct = 0;
    for chunk in clips.chunks(batch_size.max(1)) {
        let refs: Vec<&ClipRecord> = chunk.iter().collect();
        let x = stack(&refs, frames, |_| SampleMode::Test)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let y = net.logits(&mut tape, xv, RunOpts::eval(), None)?;
        for (row, c) in tape.value(y).data().chunks(k).zip(chunk) {
            correct += usize::from(argmax(row) == c.label);
        }
    }
    Ok(correct)
}

/// Accuracy with centre-frame sampling and running statistics.
pub fn evaluate(net: &Network<f32>, clips: &[ClipRecord], frames: usize, batch_size: usize) -> Result<f64> {
    evaluate_parallel(net, clips, frames, batch_size, 1)
}

/// [`evaluate`] split over `workers` threads. Eval-mode outputs are per
/// clip, so the result does not depend on the split.
pub fn evaluate_parallel(
    net: &Network<f32>,
    clips: &[ClipRecord],
    frames: usize,
    batch_size: usize,
    workers: usize,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Config("no clips to evaluate".into()));
    }
    let workers = workers.clamp(1, clips.len());
    let correct = if workers == 1 {
        count_correct(net, clips, frames, batch_size)?
    } else {
        let share = clips.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = clips
                .chunks(share)
                .map(|part| s.spawn(move || count_correct(net, part, frames, batch_size)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(correct as f64 / clips.len() as f64)
}

pub fn train(cfg: &TrainConfig, train_set: &[ClipRecord], val_set: &[ClipRecord]) -> Result<TrainOutcome> {
    train_with(cfg, train_set, val_set, |_| {})
}

/// Trains and evaluates; `on_epoch` sees each epoch's log as it completes.
pub fn train_with(
    cfg: &TrainConfig,
    train_set: &[ClipRecord],
    val_set: &[ClipRecord],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let spec = cfg.spec();
    let mut net = Network::<f32>::build(&spec, cfg.seed)?;
    let mut opt = SgdState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let clips: Vec<&ClipRecord> = batch.iter().map(|&i| &train_set[i]).collect();
            let x = stack(&clips, cfg.frames, |c| SampleMode::Train {
                seed: sample_seed(cfg.seed, epoch, c.clip_id),
            })?;
            let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
            let mut tape = Tape::new();
            let xv = tape.leaf(x, false);
            let logits = net.logits(&mut tape, xv, RunOpts::train(), Some(&mut rng))?;
            let k = spec.classes;
            for (row, &l) in tape.value(logits).data().chunks(k).zip(&labels) {
                correct += usize::from(argmax(row) == l);
            }
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Malformed(format!("loss diverged at epoch {epoch}")));
            }
            loss_sum += lv * clips.len() as f64;
            let grads = tape.backward(loss)?;
            opt.learning_rate = cosine_lr(cfg.learning_rate, step, total);
            opt.step(net.params_mut(), &grads);
            net.absorb_batch_stats(&tape);
            step += 1;
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
        };
        on_epoch(&log);
        history.push(log);
    }
    let val_accuracy = evaluate(&net, val_set, cfg.frames, cfg.batch_size)?;
    Ok(TrainOutcome {
        history,
        val_accuracy,
        network: net,
    })
}
