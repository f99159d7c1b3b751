//! Downstream protocols: linear evaluation on frozen features, full
//! fine-tuning, mining precision of a frozen checkpoint, and embedding export.

mod embeddings;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::center_crop;
use crate::autodiff::{Graph, Tensor, Var};
use crate::contrastive::{center_and_normalize, mine_topk_where, ContextQueue};
use crate::error::{Error, Result};
use crate::model::{batch_rows, Architecture, Forward, Mode, ModelParams};
use crate::skeleton::{normalize_sequence, Dataset, SkeletonSequence, Split};
use crate::trainer::prepare;

pub use embeddings::{export_embeddings, load_embeddings, read_embeddings, write_embeddings, EmbeddingRecord, EMBD_MAGIC, EMBD_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate for encoder and classifier during fine-tuning.
    pub finetune_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Clip length fed to the encoder (centre crop).
    pub frames: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.3,
            finetune_lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 128,
            frames: 64,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.frames == 0 || self.lr < 0.0 || self.finetune_lr < 0.0 {
            return Err(Error::Config("batch size and frames must be positive, learning rates non-negative".into()));
        }
        Ok(())
    }

    fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return base;
        }
        base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / (total - 1) as f64).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub top1: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]` counts on the test split.
    pub confusion: Vec<Vec<usize>>,
    pub config: EvalConfig,
    pub checkpoint_hash: Option<String>,
    pub encoder_hash: String,
}

impl EvalReport {
    fn from_predictions(protocol: &str, labels: &[usize], predicted: &[usize], classes: usize, config: &EvalConfig) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        for (&t, &p) in labels.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let correct = labels.iter().zip(predicted).filter(|(t, p)| t == p).count();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        Self {
            protocol: protocol.into(),
            top1: correct as f64 / labels.len().max(1) as f64,
            per_class,
            confusion,
            config: config.clone(),
            checkpoint_hash: None,
            encoder_hash: String::new(),
        }
    }
}

/// SHA-256 over the little-endian bytes of the encoder parameters.
pub fn encoder_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for v in &params.values[params.encoder_range()] {
        for x in v.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn file_hash(path: &std::path::Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn labelled(seqs: &[&SkeletonSequence]) -> Result<Vec<usize>> {
    seqs.iter()
        .map(|s| s.label.ok_or_else(|| Error::invalid(format!("sample {:?} has no label", s.sample_id))))
        .collect()
}

fn cropped(seqs: &[&SkeletonSequence], frames: usize) -> Result<Vec<SkeletonSequence>> {
    prepare(seqs).iter().map(|s| center_crop(s, frames).map(|c| normalize_sequence(&c))).collect()
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data).expect("non-empty selection")
}

/// Eval-mode features of centre-cropped clips, `h` (`projected = false`) or
/// `z = g(h)`.
pub fn extract_features(params: &ModelParams, seqs: &[SkeletonSequence], frames: usize, projected: bool) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in seqs.chunks(128) {
        let x = batch_rows(chunk)?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let xv = g.constant(x);
        let mut fwd = Forward::new(params, &vars, Mode::Eval);
        let h = fwd.encode(&mut g, xv, chunk.len(), frames)?;
        let out = if projected { fwd.project(&mut g, h)? } else { h };
        width = g.value(out).shape()[1];
        rows.extend_from_slice(g.value(out).data());
    }
    Tensor::new(vec![seqs.len(), width], rows)
}

/// Scales every column to zero mean and unit variance using `reference`
/// statistics.
pub fn standardize(reference: &Tensor, others: &[&Tensor]) -> Vec<Tensor> {
    let (n, c) = (reference.shape()[0], reference.shape()[1]);
    let mut mean = vec![0.0; c];
    for row in reference.data().chunks(c) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
    }
    let mut var = vec![0.0; c];
    for row in reference.data().chunks(c) {
        for j in 0..c {
            var[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
    std::iter::once(reference)
        .chain(others.iter().copied())
        .map(|t| {
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(c) {
                for j in 0..c {
                    row[j] = (row[j] - mean[j]) * scale[j];
                }
            }
            out
        })
        .collect()
}

/// Softmax-regression head `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[features, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn predict(&self, features: &Tensor) -> Vec<usize> {
        let c = self.bias.numel();
        let f = self.weight.shape()[0];
        features
            .data()
            .chunks(f)
            .map(|x| {
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..c {
                    let s = self.bias.data()[k] + (0..f).map(|j| x[j] * self.weight.data()[j * c + k]).sum::<f64>();
                    if s > best.1 {
                        best = (k, s);
                    }
                }
                best.0
            })
            .collect()
    }
}

/// Mean softmax cross-entropy of `logits` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = g.value(logits).dims2("cross_entropy")?;
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} outside {c} classes")));
        }
        onehot[i * c + y] = 1.0;
    }
    let p = g.softmax(logits, 1.0)?;
    let logp = g.log(p)?;
    let mask = g.constant(Tensor::new(vec![n, c], onehot)?);
    let picked = g.mul(mask, logp)?;
    let total = g.reduce_sum(picked, None)?;
    g.scale(total, -1.0 / n as f64)
}

fn sgd(values: &mut [Tensor], velocity: &mut [Tensor], grads: &[Tensor], lr: f64, cfg: &EvalConfig) {
    for ((w, v), g) in values.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *wi;
            *wi -= lr * *vi;
        }
    }
}

/// Trains a zero-initialized linear classifier on fixed features.
pub fn train_linear(features: &Tensor, labels: &[usize], classes: usize, cfg: &EvalConfig) -> Result<LinearClassifier> {
    let (n, f) = features.dims2("train_linear")?;
    if labels.len() != n {
        return Err(Error::shape("train_linear", format!("{n} rows, {} labels", labels.len())));
    }
    let mut clf = LinearClassifier::zeros(f, classes);
    let mut vel = [Tensor::zeros(&[f, classes]), Tensor::zeros(&[classes])];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.min(n);
    let per_epoch = n.div_ceil(batch);
    let total = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let mut g = Graph::new();
            let w = g.param(clf.weight.clone());
            let b = g.param(clf.bias.clone());
            let x = g.constant(rows_of(features, idx));
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let xw = g.matmul(x, w)?;
            let logits = g.add_bias(xw, b)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            let mut grads = g.backward(loss)?;
            let gs = [grads.take(w).expect("weight grad"), grads.take(b).expect("bias grad")];
            let mut vals = [clf.weight, clf.bias];
            sgd(&mut vals, &mut vel, &gs, cfg.lr_at(cfg.lr, step, total), cfg);
            let [wv, bv] = vals;
            clf = LinearClassifier { weight: wv, bias: bv };
            step += 1;
        }
    }
    Ok(clf)
}

fn class_count(dataset: &Dataset, labels: &[usize]) -> Result<usize> {
    let classes = dataset.num_classes();
    if classes < 2 {
        return Err(Error::invalid("evaluation needs at least two labelled classes"));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::invalid("label outside the dataset's class range"));
    }
    Ok(classes)
}

/// Frozen encoder, eval-mode batchnorm, standardized `h` features, linear
/// classifier trained on the train split and scored on the test split.
pub fn linear_evaluate(params: &ModelParams, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let before = encoder_hash(params);
    let train = dataset.split(Split::Train);
    let test = dataset.split(Split::Test);
    let (ytr, yte) = (labelled(&train)?, labelled(&test)?);
    let classes = class_count(dataset, &ytr)?;
    class_count(dataset, &yte)?;
    let ftr = extract_features(params, &cropped(&train, cfg.frames)?, cfg.frames, false)?;
    let fte = extract_features(params, &cropped(&test, cfg.frames)?, cfg.frames, false)?;
    let std = standardize(&ftr, &[&fte]);
    let clf = train_linear(&std[0], &ytr, classes, cfg)?;
    let mut report = EvalReport::from_predictions("linear", &yte, &clf.predict(&std[1]), classes, cfg);
    report.encoder_hash = encoder_hash(params);
    debug_assert_eq!(before, report.encoder_hash);
    Ok(report)
}

/// Trains encoder and classifier together on the train split. Pass
/// `ModelParams::init` output for a from-scratch supervised baseline.
pub fn finetune_evaluate(params: &ModelParams, dataset: &Dataset, cfg: &EvalConfig) -> Result<(EvalReport, ModelParams)> {
    cfg.validate()?;
    let train = dataset.split(Split::Train);
    let test = dataset.split(Split::Test);
    let (ytr, yte) = (labelled(&train)?, labelled(&test)?);
    let classes = class_count(dataset, &ytr)?;
    class_count(dataset, &yte)?;
    let xtr = cropped(&train, cfg.frames)?;
    let xte = cropped(&test, cfg.frames)?;

    let mut model = params.clone();
    let enc = model.encoder_range();
    let fdim = model.config.encoder.feature_dim();
    let mut clf = LinearClassifier::zeros(fdim, classes);
    let mut vel: Vec<Tensor> = model.values[enc.clone()].iter().map(|v| Tensor::zeros(v.shape())).collect();
    vel.push(Tensor::zeros(&[fdim, classes]));
    vel.push(Tensor::zeros(&[classes]));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // batchnorm needs at least two rows; the remainder batch is dropped
    let batch = cfg.batch_size.min(xtr.len());
    let per_epoch = xtr.len() / batch;
    let total = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..xtr.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks_exact(batch) {
            let clips: Vec<SkeletonSequence> = idx.iter().map(|&i| xtr[i].clone()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let w = g.param(clf.weight.clone());
            let b = g.param(clf.bias.clone());
            let x = g.constant(batch_rows(&clips)?);
            let mut fwd = Forward::new(&model, &vars, Mode::Train);
            let h = fwd.encode(&mut g, x, idx.len(), cfg.frames)?;
            let stats = std::mem::take(&mut fwd.stats);
            let hw = g.matmul(h, w)?;
            let logits = g.add_bias(hw, b)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            let mut grads = g.backward(loss)?;
            let mut gs: Vec<Tensor> = vars[enc.clone()]
                .iter()
                .map(|v| grads.take(*v).expect("encoder grad"))
                .collect();
            gs.push(grads.take(w).expect("weight grad"));
            gs.push(grads.take(b).expect("bias grad"));
            let mut vals: Vec<Tensor> = model.values[enc.clone()].to_vec();
            vals.push(clf.weight.clone());
            vals.push(clf.bias.clone());
            sgd(&mut vals, &mut vel, &gs, cfg.lr_at(cfg.finetune_lr, step, total), cfg);
            clf.bias = vals.pop().expect("bias");
            clf.weight = vals.pop().expect("weight");
            for (dst, src) in model.values[enc.clone()].iter_mut().zip(vals) {
                *dst = src;
            }
            model.update_running(&stats);
            step += 1;
        }
    }
    let fte = extract_features(&model, &xte, cfg.frames, false)?;
    let mut report = EvalReport::from_predictions("finetune", &yte, &clf.predict(&fte), classes, cfg);
    report.encoder_hash = encoder_hash(&model);
    Ok((report, model))
}

/// Supervised baseline from randomly initialized weights.
pub fn scratch_model(arch: &Architecture, dataset: &Dataset, seed: u64) -> Result<ModelParams> {
    ModelParams::init(arch.build(dataset.adjacency()?)?, seed)
}

/// Replays queue dynamics on fixed embeddings. Rows are visited in batches of
/// a seeded shuffle; each batch is centred and normalized, then pushed. Once
/// the queue is full, one further pass over all rows measures, for each row
/// before its batch is pushed, the fraction of its top-K non-self queue
/// entries sharing its label.
pub fn mining_precision_embeddings(
    embeddings: &Tensor,
    labels: &[usize],
    k: usize,
    capacity: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let (n, d) = embeddings.dims2("mining_precision")?;
    if k > capacity {
        return Err(Error::invalid(format!("K = {k} exceeds queue size {capacity}")));
    }
    if labels.len() != n || batch_size < 2 || batch_size > n {
        return Err(Error::invalid("need one label per row and 2 <= batch size <= rows"));
    }
    let mut queue = ContextQueue::new(capacity, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut push_epoch = |queue: &mut ContextQueue, measure: bool, rng: &mut ChaCha8Rng| -> Result<(f64, usize)> {
        order.shuffle(rng);
        let mut hits = 0.0;
        let mut count = 0;
        for ids in order.chunks_exact(batch_size) {
            let bar = center_and_normalize(&rows_of(embeddings, ids))?;
            if measure {
                let entries = queue.snapshot()?;
                let qids = queue.ids_in_order();
                for (r, &id) in ids.iter().enumerate() {
                    let v = bar.row(r);
                    let scores: Vec<f64> = entries.data().chunks(d).map(|a| a.iter().zip(v).map(|(x, y)| x * y).sum()).collect();
                    let pos = mine_topk_where(&scores, k, |i| qids[i] != id)?;
                    if !pos.indices.is_empty() {
                        let same = pos.indices.iter().filter(|&&i| labels[qids[i]] == labels[id]).count();
                        hits += same as f64 / pos.indices.len() as f64;
                        count += 1;
                    }
                }
            }
            queue.push(&bar, ids)?;
            if !measure && queue.is_full() {
                break;
            }
        }
        Ok((hits, count))
    };
    while !queue.is_full() {
        push_epoch(&mut queue, false, &mut rng)?;
    }
    let (hits, count) = push_epoch(&mut queue, true, &mut rng)?;
    if count == 0 {
        return Err(Error::invalid("no sample had a non-self queue entry"));
    }
    Ok(hits / count as f64)
}

/// Mining precision of a frozen checkpoint on the train split: the target
/// projection `z` of centre-cropped clips is replayed through the queue.
pub fn mining_precision(
    params: &ModelParams,
    dataset: &Dataset,
    k: usize,
    capacity: usize,
    batch_size: usize,
    frames: usize,
    seed: u64,
) -> Result<f64> {
    let train = dataset.split(Split::Train);
    let labels = labelled(&train)?;
    let z = extract_features(params, &cropped(&train, frames)?, frames, true)?;
    mining_precision_embeddings(&z, &labels, k, capacity, batch_size, seed)
}

#[cfg(test)]
mod tests;
