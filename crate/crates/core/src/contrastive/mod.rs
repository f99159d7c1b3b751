//! Contextual queue, similarity distributions, the distribution-matching
//! loss, top-K positive mining and the positive-enhanced loss.
//!
//! Student weights are `softmax(p̄ · a_i / τ)` over the queue, target weights
//! `softmax(z̄′ · a_i / τ′)`. Stage one matches them with a KL divergence.
//! Stage two first mines the K queue entries most similar to the target
//! embedding, raises their target similarity to 1 while keeping the original
//! denominator, and matches the student to that enhanced target.

mod queue;

use std::cell::Cell;
use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Graph, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};

pub use queue::ContextQueue;

thread_local! {
    static MINE_CALLS: Cell<u64> = const { Cell::new(0) };
    static ENHANCE_CALLS: Cell<u64> = const { Cell::new(0) };
    static DEGENERATE_ROWS: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread counts of calls into the stage-two code paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub mine_topk: u64,
    pub enhance_target: u64,
}

pub fn call_counts() -> CallCounts {
    CallCounts {
        mine_topk: MINE_CALLS.with(Cell::get),
        enhance_target: ENHANCE_CALLS.with(Cell::get),
    }
}

/// Rows seen by [`center_and_normalize`] on this thread whose centered norm
/// fell under the epsilon guard.
pub fn degenerate_rows() -> u64 {
    DEGENERATE_ROWS.with(Cell::get)
}

fn bump(counter: &'static std::thread::LocalKey<Cell<u64>>, by: u64) {
    counter.with(|c| c.set(c.get() + by));
}

/// Subtracts the per-dimension batch mean, then l2-normalizes each row.
pub fn center_and_normalize_var(g: &mut Graph, batch: Var) -> Result<Var> {
    let (rows, cols) = g.value(batch).dims2("center_and_normalize")?;
    if rows < 2 {
        return Err(Error::invalid("centering needs a batch of at least 2"));
    }
    let centered = g.mean_center_rows(batch)?;
    let degenerate = g
        .value(centered)
        .data()
        .chunks(cols)
        .filter(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt() <= NORM_EPS)
        .count();
    if degenerate > 0 {
        bump(&DEGENERATE_ROWS, degenerate as u64);
        log::warn!("{degenerate} of {rows} rows are degenerate after centering");
    }
    g.l2_normalize_rows(centered)
}

pub fn center_and_normalize(batch: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(batch.clone());
    let out = center_and_normalize_var(&mut g, v)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution {
    pub weights: Vec<f64>,
    pub tau: f64,
    pub normalized: bool,
}

/// Max-shifted exponentials `exp((x_i - m) / tau)` and their sum.
fn shifted_exps(dots: &[f64], tau: f64) -> (Vec<f64>, f64, f64) {
    let max = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let exps = dots
        .iter()
        .map(|x| {
            let e = ((x - max) / tau).exp();
            total += e;
            e
        })
        .collect();
    (exps, max, total)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature {tau} must be positive")))
    }
}

/// `softmax(dots / tau)`.
pub fn similarity_from_dots(dots: &[f64], tau: f64) -> Result<SimilarityDistribution> {
    check_tau(tau)?;
    if dots.is_empty() {
        return Err(Error::invalid("similarity over an empty queue"));
    }
    let (mut weights, _, total) = shifted_exps(dots, tau);
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(SimilarityDistribution {
        weights,
        tau,
        normalized: true,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot products of `v` with every queue entry, oldest first.
pub fn queue_dots(v: &[f64], queue: &ContextQueue) -> Result<Vec<f64>> {
    if v.len() != queue.dim() {
        return Err(Error::shape("similarity", format!("embedding dim {}, queue dim {}", v.len(), queue.dim())));
    }
    Ok((0..queue.len()).map(|i| dot(v, queue.entry(i))).collect())
}

pub fn similarity_distribution(v: &[f64], queue: &ContextQueue, tau: f64) -> Result<SimilarityDistribution> {
    check_tau(tau)?;
    similarity_from_dots(&queue_dots(v, queue)?, tau)
}

/// `H(t, s) - H(t)` with `0 · log 0 = 0`; `t` need not sum to one.
fn cross_minus_entropy(t: &[f64], s: &[f64]) -> Result<f64> {
    if t.len() != s.len() {
        return Err(Error::shape("kl_loss", format!("{} target vs {} student weights", t.len(), s.len())));
    }
    let mut cross = 0.0;
    let mut entropy = 0.0;
    for (&ti, &si) in t.iter().zip(s) {
        if ti == 0.0 {
            continue;
        }
        if si <= 0.0 {
            return Err(Error::LogDomain("student weight is zero where the target is positive"));
        }
        cross -= ti * si.ln();
        entropy -= ti * ti.ln();
    }
    Ok(cross - entropy)
}

/// `KL(target || student)`.
pub fn kl_loss(target: &SimilarityDistribution, student: &SimilarityDistribution) -> Result<f64> {
    cross_minus_entropy(&target.weights, &student.weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningResult {
    /// Selected queue indices, best first.
    pub indices: Vec<usize>,
    /// Score of each selected index.
    pub scores: Vec<f64>,
}

/// Higher score first, lower index on ties.
fn rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest scores.
pub fn mine_topk(scores: &[f64], k: usize) -> Result<MiningResult> {
    if k > scores.len() {
        return Err(Error::invalid(format!("K = {k} exceeds queue size {}", scores.len())));
    }
    mine_topk_where(scores, k, |_| true)
}

/// Top-`k` among indices for which `eligible` holds; returns fewer when not
/// enough are eligible.
pub fn mine_topk_where(scores: &[f64], k: usize, eligible: impl Fn(usize) -> bool) -> Result<MiningResult> {
    bump(&MINE_CALLS, 1);
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("mining scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| eligible(i)).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Ok(MiningResult {
            indices: Vec::new(),
            scores: Vec::new(),
        });
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank(scores, a, b));
    let selected = idx.iter().map(|&i| scores[i]).collect();
    Ok(MiningResult {
        indices: idx,
        scores: selected,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedTargetDistribution {
    pub values: Vec<f64>,
    pub positives: Vec<usize>,
    pub tau_prime: f64,
    pub renormalized: bool,
}

/// Replaces the similarity of each positive by 1 while keeping the
/// denominator computed from the original dots:
/// `d_i = exp(1/τ′) / Z` for positives, `exp(x_i/τ′) / Z` otherwise, with
/// `Z = Σ_j exp(x_j/τ′)`. The result does not sum to one unless
/// `renormalize` is set.
pub fn enhance_target(
    raw_dots: &[f64],
    positives: &[usize],
    tau_prime: f64,
    renormalize: bool,
) -> Result<EnhancedTargetDistribution> {
    bump(&ENHANCE_CALLS, 1);
    check_tau(tau_prime)?;
    if raw_dots.is_empty() {
        return Err(Error::invalid("similarity over an empty queue"));
    }
    let (mut values, max, total) = shifted_exps(raw_dots, tau_prime);
    let boosted = ((1.0 - max) / tau_prime).exp();
    for &i in positives {
        let v = values
            .get_mut(i)
            .ok_or_else(|| Error::invalid(format!("positive index {i} outside queue of {}", raw_dots.len())))?;
        *v = boosted;
    }
    values.iter_mut().for_each(|v| *v /= total);
    // with nothing mined the weights already sum to one
    if renormalize && !positives.is_empty() {
        let sum: f64 = values.iter().sum();
        values.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(EnhancedTargetDistribution {
        values,
        positives: positives.to_vec(),
        tau_prime,
        renormalized: renormalize,
    })
}

/// `H(D′_NP, D) - H(D′_NP)`, evaluated as written even when the target does
/// not sum to one.
pub fn enhanced_loss(target: &EnhancedTargetDistribution, student: &SimilarityDistribution) -> Result<f64> {
    cross_minus_entropy(&target.values, &student.weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningSide {
    /// Score queue entries by `z̄′ · a_i`.
    Target,
    /// Score queue entries by `p̄ · a_i`.
    Student,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Distribution matching.
    One,
    /// Positive-enhanced matching.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub tau: f64,
    pub tau_prime: f64,
    pub k: usize,
    pub renormalize: bool,
    pub mining_side: MiningSide,
}

#[derive(Debug)]
pub struct BatchLoss {
    /// Mean per-sample loss.
    pub loss: Var,
    /// Mean over the batch of the largest target-side dot product.
    pub mean_top1_sim: f64,
    /// Positives mined per sample, averaged.
    pub mean_mined: f64,
}

/// Loss of a batch of student embeddings `p̄` (graph rows, unit norm) against
/// target embeddings `z̄′` over a full queue. Queue entries whose id equals
/// the sample's id are never mined.
pub fn batch_loss(
    g: &mut Graph,
    student: Var,
    target: &Tensor,
    ids: &[usize],
    queue: &ContextQueue,
    stage: Stage,
    settings: &LossSettings,
) -> Result<BatchLoss> {
    check_tau(settings.tau)?;
    check_tau(settings.tau_prime)?;
    if !queue.is_full() {
        return Err(Error::invalid(format!(
            "loss needs a full queue ({} of {})",
            queue.len(),
            queue.capacity()
        )));
    }
    let (b, d) = target.dims2("batch_loss")?;
    if g.value(student).shape() != [b, d] || ids.len() != b || d != queue.dim() {
        return Err(Error::shape(
            "batch_loss",
            format!("student {:?}, target [{b},{d}], {} ids, queue dim {}", g.value(student).shape(), ids.len(), queue.dim()),
        ));
    }
    let n = queue.len();
    let entries = queue.snapshot()?;
    let queue_ids = queue.ids_in_order();

    let qv = g.constant(entries.clone());
    let logits = g.matmul_nt(student, qv)?;
    let soft = g.softmax(logits, settings.tau)?;
    let log_soft = g.log(soft)?;

    let mut target_dots = vec![0.0; b * n];
    gemm(b, d, n, 1.0, target.data(), false, entries.data(), true, 0.0, &mut target_dots);

    let mut weights = Vec::with_capacity(b * n);
    let mut entropy = 0.0;
    let mut top1 = 0.0;
    let mut mined = 0usize;
    for (row, dots) in target_dots.chunks(n).enumerate() {
        top1 += dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let t = match stage {
            Stage::One => similarity_from_dots(dots, settings.tau_prime)?.weights,
            Stage::Two => {
                let scores = match settings.mining_side {
                    MiningSide::Target => dots,
                    MiningSide::Student => &g.value(logits).data()[row * n..(row + 1) * n],
                };
                let own = ids[row];
                let pos = mine_topk_where(scores, settings.k, |i| queue_ids[i] != own)?;
                mined += pos.indices.len();
                enhance_target(dots, &pos.indices, settings.tau_prime, settings.renormalize)?.values
            }
        };
        entropy -= t.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        weights.extend(t);
    }

    let tv = g.constant(Tensor::new(vec![b, n], weights)?);
    let prod = g.mul(tv, log_soft)?;
    let total = g.reduce_sum(prod, None)?;
    let cross = g.scale(total, -1.0 / b as f64)?;
    let ent = g.constant(Tensor::scalar(entropy / b as f64));
    let loss = g.sub(cross, ent)?;
    Ok(BatchLoss {
        loss,
        mean_top1_sim: top1 / b as f64,
        mean_mined: mined as f64 / b as f64,
    })
}

#[cfg(test)]
mod tests;
