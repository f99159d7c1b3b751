//! Pretrain-then-evaluate runs and parameter sweeps that share their common
//! training prefix.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{file_hash, linear_evaluate, mining_precision, EvalConfig, EvalReport};
use crate::model::{Checkpoint, ModelParams};
use crate::skeleton::Dataset;
use crate::trainer::{checkpoint_path, run_pretrain, RunOptions, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    K,
    TauPrime,
    StageSwitchEpoch,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "k" => Ok(Self::K),
            "tau_prime" => Ok(Self::TauPrime),
            "stage_switch_epoch" | "switch" => Ok(Self::StageSwitchEpoch),
            other => Err(Error::Config(format!("cannot sweep {other:?}; expected k, tau_prime or stage_switch_epoch"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::K => "k",
            Self::TauPrime => "tau_prime",
            Self::StageSwitchEpoch => "stage_switch_epoch",
        }
    }

    pub fn apply(self, cfg: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let whole = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} needs a non-negative integer, got {v}", self.name())))
            }
        };
        let mut out = cfg.clone();
        match self {
            Self::K => out.k = whole(value)?,
            Self::TauPrime => out.tau_prime = value,
            Self::StageSwitchEpoch => out.stage_switch_epoch = whole(value)?,
        }
        out.validate()?;
        Ok(out)
    }

    /// Epoch up to which every value trains identically, if any.
    fn shared_prefix(self, cfg: &TrainConfig, values: &[f64]) -> Option<usize> {
        match self {
            Self::K => Some(cfg.stage_switch_epoch),
            Self::StageSwitchEpoch => values.iter().map(|&v| v as usize).min(),
            // stage one targets already use tau_prime
            Self::TauPrime => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub param: Option<String>,
    pub value: Option<f64>,
    pub seed: u64,
    pub top1: f64,
    pub mining_precision: f64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub wall_seconds: f64,
}

/// Linear evaluation plus mining precision of a finished run.
pub fn evaluate_run(
    params: &ModelParams,
    cfg: &TrainConfig,
    dataset: &Dataset,
    eval: &EvalConfig,
    checkpoint: &Path,
) -> Result<(EvalReport, f64)> {
    let mut report = linear_evaluate(params, dataset, eval)?;
    report.checkpoint_hash = Some(file_hash(checkpoint)?);
    let precision = mining_precision(
        params,
        dataset,
        cfg.k.max(1),
        cfg.queue_size,
        cfg.batch_size,
        cfg.augmentation.output_length,
        eval.seed,
    )?;
    Ok((report, precision))
}

fn finish(
    cfg: &TrainConfig,
    dataset: &Dataset,
    eval: &EvalConfig,
    out_dir: &Path,
    resume: Option<TrainState>,
    started: Instant,
) -> Result<(RunSummary, EvalReport)> {
    let outcome = run_pretrain(
        cfg,
        dataset,
        RunOptions {
            out_dir: out_dir.to_path_buf(),
            resume,
            stop_after_epoch: None,
        },
    )?;
    let (report, precision) = evaluate_run(&outcome.state.params, cfg, dataset, eval, &outcome.final_checkpoint)?;
    std::fs::write(out_dir.join("eval_linear.json"), serde_json::to_string_pretty(&report)?)?;
    let summary = RunSummary {
        param: None,
        value: None,
        seed: cfg.seed,
        top1: report.top1,
        mining_precision: precision,
        final_loss: outcome.metrics.iter().rev().find_map(|m| m.loss),
        checkpoint: outcome.final_checkpoint,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "{}: top1 {:.4}, mining precision {:.4}",
        out_dir.display(),
        summary.top1,
        summary.mining_precision
    );
    Ok((summary, report))
}

/// Full pretraining followed by linear evaluation and mining precision.
pub fn pretrain_and_evaluate(cfg: &TrainConfig, dataset: &Dataset, eval: &EvalConfig, out_dir: &Path) -> Result<RunSummary> {
    Ok(finish(cfg, dataset, eval, out_dir, None, Instant::now())?.0)
}

/// Runs every `(seed, value)` combination. Values that agree on an initial
/// run of epochs resume from one shared checkpoint per seed.
pub fn sweep(
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    dataset: &Dataset,
    eval: &EvalConfig,
    out_dir: &Path,
    parallel: bool,
) -> Result<Vec<RunSummary>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let configs: Vec<TrainConfig> = values.iter().map(|&v| param.apply(base, v)).collect::<Result<_>>()?;
    let mut summaries = Vec::new();
    for &seed in seeds {
        let started = Instant::now();
        let seeded: Vec<TrainConfig> = configs.iter().map(|c| TrainConfig { seed, ..c.clone() }).collect();
        let prefix = param.shared_prefix(&seeded[0], values).filter(|&e| e > 0);
        let resume = match prefix {
            Some(epoch) => {
                let dir = out_dir.join(format!("seed{seed}")).join("prefix");
                // the prefix runs stage one only, under the first value's config
                let prefix_cfg = TrainConfig {
                    stage_switch_epoch: seeded[0].epochs,
                    ..seeded[0].clone()
                };
                run_pretrain(
                    &prefix_cfg,
                    dataset,
                    RunOptions {
                        out_dir: dir.clone(),
                        resume: None,
                        stop_after_epoch: Some(epoch),
                    },
                )?;
                Some(Checkpoint::load(&checkpoint_path(&dir, epoch))?)
            }
            None => None,
        };
        let run_one = |i: usize| -> Result<RunSummary> {
            let cfg = &seeded[i];
            let dir = out_dir.join(format!("seed{seed}")).join(format!("{}={}", param.name(), values[i]));
            let state = resume.as_ref().map(|ck| TrainState::from_checkpoint(ck).map(|(s, _)| s)).transpose()?;
            let (mut summary, _) = finish(cfg, dataset, eval, &dir, state, started)?;
            summary.param = Some(param.name().into());
            summary.value = Some(values[i]);
            Ok(summary)
        };
        let results: Vec<Result<RunSummary>> = if parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..values.len()).map(|i| s.spawn(move || run_one(i))).collect();
                handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
            })
        } else {
            (0..values.len()).map(run_one).collect()
        };
        for r in results {
            summaries.push(r?);
        }
    }
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_top1: f64,
    pub mean_mining_precision: f64,
    pub seeds: usize,
}

/// Seed-averaged results per value, in first-seen value order.
pub fn summarize(runs: &[RunSummary]) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = Vec::new();
    for r in runs {
        let v = r.value.unwrap_or(f64::NAN);
        let row = match rows.iter_mut().position(|row| row.value.to_bits() == v.to_bits()) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(SweepRow { value: v, mean_top1: 0.0, mean_mining_precision: 0.0, seeds: 0 });
                rows.last_mut().expect("just pushed")
            }
        };
        row.mean_top1 += r.top1;
        row.mean_mining_precision += r.mining_precision;
        row.seeds += 1;
    }
    for row in &mut rows {
        row.mean_top1 /= row.seeds as f64;
        row.mean_mining_precision /= row.seeds as f64;
    }
    rows
}

pub fn summary_table(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("| {} | top-1 | mining precision | seeds |\n|---|---|---|---|\n", param.name());
    for r in rows {
        out.push_str(&format!(
            "| {} | {:.4} | {:.4} | {} |\n",
            r.value, r.mean_top1, r.mean_mining_precision, r.seeds
        ));
    }
    out
}
