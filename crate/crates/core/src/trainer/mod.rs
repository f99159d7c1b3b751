//! Two-stage pre-training: a queue warm-up, distribution matching until
//! `stage_switch_epoch`, then positive-enhanced matching.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, augment_pair, AugmentationConfig};
use crate::autodiff::{Graph, Tensor};
use crate::contrastive::{
    batch_loss, call_counts, center_and_normalize, center_and_normalize_var, CallCounts, ContextQueue, LossSettings,
    MiningSide, Stage,
};
use crate::error::{Error, Result};
use crate::model::{
    batch_rows, forward_views, Architecture, Checkpoint, Forward, Mode, ModelConfig, ModelParams, Precision,
    ViewBatch,
};
use crate::skeleton::{normalize_sequence, Dataset, SkeletonSequence, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// First epoch trained with the positive-enhanced loss. Equal to
    /// `epochs` for distribution matching only.
    pub stage_switch_epoch: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub tau_prime: f64,
    pub k: usize,
    pub queue_size: usize,
    pub augmentation: AugmentationConfig,
    pub model: Architecture,
    pub seed: u64,
    pub symmetrize: bool,
    pub ema: bool,
    pub ema_momentum: f64,
    pub renormalize: bool,
    pub mining_side: MiningSide,
    /// Number of per-epoch checkpoints kept besides the stage-switch and
    /// final ones.
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            stage_switch_epoch: 45,
            batch_size: 128,
            peak_lr: 0.005,
            floor_lr: 5e-6,
            warmup_epochs: 2,
            momentum: 0.9,
            weight_decay: 1e-4,
            tau: 0.1,
            tau_prime: 0.05,
            k: 16,
            queue_size: 4096,
            augmentation: AugmentationConfig::default(),
            model: Architecture::default(),
            seed: 0,
            symmetrize: true,
            ema: false,
            ema_momentum: 0.99,
            renormalize: false,
            mining_side: MiningSide::Target,
            keep_checkpoints: 2,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// 400 epochs at batch 512, warm-up to 0.5 over 10 epochs, cosine decay to
    /// 0.0005, positive mining after epoch 300 with K = 100.
    pub fn paper() -> Self {
        Self {
            epochs: 400,
            stage_switch_epoch: 300,
            batch_size: 512,
            peak_lr: 0.5,
            floor_lr: 0.0005,
            warmup_epochs: 10,
            k: 100,
            queue_size: 16384,
            model: Architecture::paper(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.stage_switch_epoch == 0 || self.stage_switch_epoch > self.epochs {
            return bad("need 0 < stage_switch_epoch <= epochs");
        }
        if !(self.tau > 0.0) || !(self.tau_prime > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.k > self.queue_size || self.queue_size == 0 {
            return bad("need 0 <= k <= queue_size and a non-empty queue");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch centering");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup must end before the last epoch");
        }
        if !(self.peak_lr >= 0.0 && self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr) {
            return bad("need 0 <= floor_lr <= peak_lr");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("momentum terms must lie in [0, 1) and weight decay be non-negative");
        }
        self.augmentation.validate()
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            tau: self.tau,
            tau_prime: self.tau_prime,
            k: self.k,
            renormalize: self.renormalize,
            mining_side: self.mining_side,
        }
    }

    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch < self.stage_switch_epoch {
            Stage::One
        } else {
            Stage::Two
        }
    }

    /// Optimizer steps spent filling the queue before training.
    pub fn fill_steps(&self) -> usize {
        self.queue_size.div_ceil(self.batch_size)
    }
}

/// Linear warm-up from 0 to `peak_lr` over the warm-up steps, then cosine
/// decay reaching `floor_lr` at the last step.
pub fn lr_schedule(step: usize, config: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let total = config.epochs * steps_per_epoch;
    let warmup = config.warmup_epochs * steps_per_epoch;
    if step < warmup {
        return config.peak_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return config.peak_lr;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    config.floor_lr + (config.peak_lr - config.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub target: Option<ModelParams>,
    pub velocity: Vec<Tensor>,
    pub queue: ContextQueue,
    /// Next epoch to train.
    pub epoch: usize,
    /// Steps taken so far, queue fill included.
    pub step: u64,
}

impl TrainState {
    pub fn init(config: &TrainConfig, model: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(model, config.seed)?;
        let velocity = params.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        let queue = ContextQueue::new(config.queue_size, params.config.projector_out)?;
        let target = config.ema.then(|| params.clone());
        Ok(Self {
            params,
            target,
            velocity,
            queue,
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let echo = serde_json::json!({ "train": config, "model": self.params.config });
        let mut ck = self.params.to_checkpoint(serde_json::to_string(&echo)?, Precision::F64);
        if let Some(t) = &self.target {
            t.append_records(&mut ck, "target.", Precision::F64);
        }
        for (name, v) in self.params.names.iter().zip(&self.velocity) {
            ck.push(format!("optimizer.velocity.{name}"), v.clone(), Precision::F64);
        }
        if !self.queue.is_empty() {
            ck.push("queue.entries", self.queue.snapshot()?, Precision::F64);
            let ids = self.queue.ids_in_order().iter().map(|&i| i as f64).collect();
            ck.push("queue.ids", Tensor::from_vec(ids), Precision::F64);
        }
        ck.push(
            "state.counters",
            Tensor::from_vec(vec![self.epoch as f64, self.step as f64]),
            Precision::F64,
        );
        Ok(ck)
    }

    /// Restores the state and the training config it was saved with.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let echo: serde_json::Value = serde_json::from_str(&ck.config_json)?;
        let train: TrainConfig = serde_json::from_value(
            echo.get("train").cloned().ok_or_else(|| Error::Format("checkpoint has no training config".into()))?,
        )?;
        let params = ModelParams::from_checkpoint(ck)?;
        let target = if train.ema {
            Some(ModelParams::from_records(params.config.clone(), ck, "target.")?)
        } else {
            None
        };
        let velocity = params
            .names
            .iter()
            .map(|n| ck.require(&format!("optimizer.velocity.{n}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let mut queue = ContextQueue::new(train.queue_size, params.config.projector_out)?;
        if let Some(entries) = ck.get("queue.entries") {
            let ids: Vec<usize> = ck.require("queue.ids")?.data().iter().map(|&x| x as usize).collect();
            queue = ContextQueue::from_parts(train.queue_size, entries, &ids)?;
        }
        let counters = ck.require("state.counters")?.data();
        let state = Self {
            params,
            target,
            velocity,
            queue,
            epoch: counters[0] as usize,
            step: counters[1] as u64,
        };
        Ok((state, train))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    /// 0 while filling the queue.
    pub stage: u8,
    pub lr: f64,
    pub loss: Option<f64>,
    pub mean_top1_sim: Option<f64>,
    pub queue_fill: usize,
    pub wall_ms: f64,
}

/// Root-centres every clip on its first frame. Augmented views and
/// evaluation crops are centred again on their own first frame.
pub fn prepare(seqs: &[&SkeletonSequence]) -> Vec<SkeletonSequence> {
    seqs.iter().map(|s| normalize_sequence(s)).collect()
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub mean_top1_sim: f64,
}

/// Augments a batch, runs both branches, applies the stage's loss, takes one
/// SGD step and pushes the second view's normalized targets onto the queue.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &[&SkeletonSequence],
    ids: &[usize],
    stage: Stage,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    let mut first = Vec::with_capacity(batch.len());
    let mut second = Vec::with_capacity(batch.len());
    for s in batch {
        let (a, b) = augment_pair(s, &config.augmentation, rng)?;
        first.push(normalize_sequence(&a));
        second.push(normalize_sequence(&b));
    }
    let (x1, x2) = (batch_rows(&first)?, batch_rows(&second)?);
    let frames = config.augmentation.output_length;

    let mut g = Graph::new();
    let vars = state.params.bind(&mut g, true);
    let target_vars = state.target.as_ref().map(|t| t.bind(&mut g, false));
    let target = state.target.as_ref().zip(target_vars.as_deref());
    let views = ViewBatch {
        first: &x1,
        second: &x2,
        batch: batch.len(),
        frames,
    };
    let out = forward_views(&mut g, (&state.params, &vars), target, views, Mode::Train, config.symmetrize)?;

    let settings = config.loss_settings();
    let mut losses = Vec::with_capacity(out.pairs.len());
    let mut top1 = 0.0;
    let mut pushed = None;
    for &(p, zt) in &out.pairs {
        let p_bar = center_and_normalize_var(&mut g, p)?;
        let z_bar = center_and_normalize(g.value(zt))?;
        let bl = batch_loss(&mut g, p_bar, &z_bar, ids, &state.queue, stage, &settings)?;
        losses.push(bl.loss);
        top1 += bl.mean_top1_sim;
        pushed.get_or_insert(z_bar);
    }
    let mut loss = losses[0];
    for &l in &losses[1..] {
        loss = g.add(loss, l)?;
    }
    let loss = g.scale(loss, 1.0 / losses.len() as f64)?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {}", state.step)));
    }

    let mut grads = g.backward(loss)?;
    for ((w, v), var) in state.params.values.iter_mut().zip(state.velocity.iter_mut()).zip(&vars) {
        let grad = grads.take(*var).expect("every parameter receives a gradient");
        optimizer_update(config, w, v, &grad, lr);
    }
    state.params.update_running(&out.stats);
    if let Some(t) = state.target.as_mut() {
        t.ema_update(&state.params, config.ema_momentum);
    }
    state.queue.push(&pushed.expect("at least one view pair"), ids)?;
    state.step += 1;
    Ok(StepMetrics {
        loss: loss_value,
        mean_top1_sim: top1 / out.pairs.len() as f64,
    })
}

fn optimizer_update(config: &TrainConfig, w: &mut Tensor, v: &mut Tensor, grad: &Tensor, lr: f64) {
    let decay = config.weight_decay;
    for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
        *vi = config.momentum * *vi + (gi + decay * *wi);
        *wi -= lr * *vi;
    }
}

/// Queue warm-up step: embeds one augmented view with the target branch and
/// pushes it without computing a loss.
pub fn fill_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &[&SkeletonSequence],
    ids: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let views = batch
        .iter()
        .map(|s| augment(s, &config.augmentation, rng).map(|v| normalize_sequence(&v)))
        .collect::<Result<Vec<_>>>()?;
    let x = batch_rows(&views)?;
    let net = state.target.as_ref().unwrap_or(&state.params);
    let mut g = Graph::new();
    let vars = net.bind(&mut g, false);
    let xv = g.constant(x);
    let z = Forward::new(net, &vars, Mode::Train).embed(&mut g, xv, batch.len(), config.augmentation.output_length)?;
    let z_bar = center_and_normalize(g.value(z))?;
    state.queue.push(&z_bar, ids)?;
    state.step += 1;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `metrics.jsonl`, `config.json` and checkpoints.
    pub out_dir: PathBuf,
    /// Continue from a saved state instead of initializing.
    pub resume: Option<TrainState>,
    /// Stop after this many epochs have completed.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricRecord>,
    /// Calls into mining and enhancement made during stage-one epochs.
    pub stage_one_calls: CallCounts,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:03}.cpmp"))
}

fn write_json_line(out: &mut impl Write, record: &MetricRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn dump_diagnostics(out_dir: &Path, state: &TrainState, epoch: usize, stage: Stage, lr: f64, err: &Error) {
    let norms: Vec<(String, f64)> = state
        .params
        .names
        .iter()
        .zip(&state.params.values)
        .map(|(n, v)| (n.clone(), v.data().iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    let dump = serde_json::json!({
        "error": err.to_string(),
        "step": state.step,
        "epoch": epoch,
        "stage": stage.number(),
        "lr": lr,
        "parameter_norms": norms,
    });
    let path = out_dir.join(format!("diagnostic_step{}.json", state.step));
    if let Err(e) = fs::write(&path, dump.to_string()) {
        log::error!("could not write {}: {e}", path.display());
    } else {
        log::error!("training aborted, diagnostics in {}", path.display());
    }
}

/// Trains on the dataset's train split. Writes a metric log, a config echo and
/// checkpoints under `options.out_dir`.
pub fn run_pretrain(config: &TrainConfig, dataset: &Dataset, options: RunOptions) -> Result<PretrainOutcome> {
    config.validate()?;
    let train = prepare(&dataset.split(Split::Train));
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training samples"));
    }
    let steps_per_epoch = train.len() / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training samples",
            config.batch_size,
            train.len()
        )));
    }
    let model = config.model.build(dataset.adjacency()?)?;
    let mut state = match options.resume {
        Some(s) => {
            if s.params.config != model {
                return Err(Error::Config("resumed state was trained with a different model".into()));
            }
            s
        }
        None => TrainState::init(config, model)?,
    };
    let out_dir = options.out_dir;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    let mut log = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut record = |log: &mut BufWriter<File>, r: MetricRecord| -> Result<()> {
        write_json_line(log, &r)?;
        metrics.push(r);
        Ok(())
    };

    let order: Vec<usize> = (0..train.len()).collect();
    if state.epoch == 0 && !state.queue.is_full() {
        let mut rng = epoch_rng(config.seed, 0);
        let mut perm = order.clone();
        let mut cursor = perm.len();
        for _ in 0..config.fill_steps() {
            if cursor + config.batch_size > perm.len() {
                perm.shuffle(&mut rng);
                cursor = 0;
            }
            let ids = &perm[cursor..cursor + config.batch_size];
            cursor += config.batch_size;
            let batch: Vec<&SkeletonSequence> = ids.iter().map(|&i| &train[i]).collect();
            fill_step(&mut state, config, &batch, ids, &mut rng)?;
            record(
                &mut log,
                MetricRecord {
                    step: state.step,
                    epoch: 0,
                    stage: 0,
                    lr: 0.0,
                    loss: None,
                    mean_top1_sim: None,
                    queue_fill: state.queue.len(),
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                },
            )?;
        }
    }

    let last_epoch = options.stop_after_epoch.unwrap_or(config.epochs).min(config.epochs);
    let mut stage_one_calls = CallCounts::default();
    let mut kept: Vec<PathBuf> = Vec::new();
    let mut final_checkpoint = checkpoint_path(&out_dir, state.epoch);
    while state.epoch < last_epoch {
        let epoch = state.epoch;
        let stage = config.stage(epoch);
        let mut rng = epoch_rng(config.seed, epoch as u64 + 1);
        let mut perm = order.clone();
        perm.shuffle(&mut rng);
        let before = call_counts();
        for (i, ids) in perm.chunks_exact(config.batch_size).enumerate() {
            let lr = lr_schedule(epoch * steps_per_epoch + i, config, steps_per_epoch);
            let batch: Vec<&SkeletonSequence> = ids.iter().map(|&j| &train[j]).collect();
            let m = match train_step(&mut state, config, &batch, ids, stage, lr, &mut rng) {
                Ok(m) => m,
                Err(e) => {
                    if matches!(e, Error::NonFinite(_)) {
                        dump_diagnostics(&out_dir, &state, epoch, stage, lr, &e);
                    }
                    return Err(e);
                }
            };
            record(
                &mut log,
                MetricRecord {
                    step: state.step,
                    epoch,
                    stage: stage.number(),
                    lr,
                    loss: Some(m.loss),
                    mean_top1_sim: Some(m.mean_top1_sim),
                    queue_fill: state.queue.len(),
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                },
            )?;
        }
        if stage == Stage::One {
            let after = call_counts();
            stage_one_calls.mine_topk += after.mine_topk - before.mine_topk;
            stage_one_calls.enhance_target += after.enhance_target - before.enhance_target;
        }
        state.epoch += 1;
        let path = checkpoint_path(&out_dir, state.epoch);
        state.to_checkpoint(config)?.save(&path)?;
        log::info!("epoch {} done ({:.1}s)", state.epoch, start.elapsed().as_secs_f64());
        let protected = state.epoch == config.stage_switch_epoch || state.epoch == last_epoch;
        if !protected {
            kept.push(path.clone());
            while kept.len() > config.keep_checkpoints {
                let old = kept.remove(0);
                fs::remove_file(&old)?;
            }
        }
        final_checkpoint = path;
    }
    if !final_checkpoint.exists() {
        state.to_checkpoint(config)?.save(&final_checkpoint)?;
    }
    Ok(PretrainOutcome {
        state,
        metrics,
        stage_one_calls,
        final_checkpoint,
    })
}

/// Reads a metric log written by [`run_pretrain`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
