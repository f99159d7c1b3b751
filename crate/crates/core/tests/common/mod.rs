//! Desk-scale training runs shared by the directional acceptance checks.
//!
//! Every seed trains one stage-one prefix up to the stage switch. The K sweep
//! and the run without positive mining resume from that prefix, so the K = 16
//! continuation doubles as the CPM run.

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use cpm::cli::experiment::evaluate_run;
use cpm::evaluation::{linear_evaluate, scratch_model, EvalConfig};
use cpm::model::Checkpoint;
use cpm::skeleton::{synthesize, Dataset, SynthConfig};
use cpm::trainer::{checkpoint_path, run_pretrain, PretrainOutcome, RunOptions, TrainConfig, TrainState};

pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const K_VALUES: [usize; 5] = [1, 4, 16, 64, 256];

/// Writes to the stdout handle rather than `println!`, so the line is shown
/// even when the test harness captures output.
pub fn report(criterion: usize, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stdout().lock(), "criterion {criterion}: {verdict} {detail}");
}

/// Serializes the long-running checks so their wall-clock budgets are not
/// shared with each other.
pub fn heavy_lock() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn dataset() -> Dataset {
    synthesize(&SynthConfig::default()).expect("default synthetic dataset")
}

#[derive(Clone, Debug)]
pub struct Evaluated {
    pub top1: f64,
    pub precision: f64,
    pub finite: bool,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct SeedRuns {
    pub prefix_seconds: f64,
    pub random_init_top1: f64,
    pub random_init_seconds: f64,
    /// Stage two from the prefix, one entry per `K_VALUES`.
    pub sweep: Vec<Evaluated>,
    /// Stage one continued to the last epoch.
    pub without_mining: Evaluated,
}

impl SeedRuns {
    pub fn cpm(&self) -> &Evaluated {
        let i = K_VALUES.iter().position(|&k| k == TrainConfig::desk().k).expect("desk K is swept");
        &self.sweep[i]
    }
}

pub struct SharedRuns {
    pub seeds: Vec<SeedRuns>,
}

impl SharedRuns {
    pub fn mean(&self, f: impl Fn(&SeedRuns) -> f64) -> f64 {
        self.seeds.iter().map(f).sum::<f64>() / self.seeds.len() as f64
    }
}

fn finite(outcome: &PretrainOutcome) -> bool {
    outcome.metrics.iter().filter_map(|m| m.loss).all(f64::is_finite)
}

fn continue_from(prefix: &Checkpoint, cfg: &TrainConfig, data: &Dataset, eval: &EvalConfig, dir: &Path) -> Evaluated {
    let start = Instant::now();
    let (state, _) = TrainState::from_checkpoint(prefix).expect("prefix checkpoint");
    let options = RunOptions {
        out_dir: dir.to_path_buf(),
        resume: Some(state),
        stop_after_epoch: None,
    };
    match run_pretrain(cfg, data, options) {
        Ok(outcome) => {
            let (rep, precision) =
                evaluate_run(&outcome.state.params, cfg, data, eval, &outcome.final_checkpoint).expect("evaluation");
            Evaluated {
                top1: rep.top1,
                precision,
                finite: finite(&outcome),
                seconds: start.elapsed().as_secs_f64(),
            }
        }
        Err(e) => {
            println!("run in {} failed: {e}", dir.display());
            Evaluated {
                top1: 0.0,
                precision: 0.0,
                finite: false,
                seconds: start.elapsed().as_secs_f64(),
            }
        }
    }
}

fn run_seed(seed: u64, data: &Dataset, root: &Path) -> SeedRuns {
    let base = TrainConfig { seed, ..TrainConfig::desk() };
    let eval = EvalConfig { seed, ..EvalConfig::default() };

    let start = Instant::now();
    let scratch = scratch_model(&base.model, data, seed).expect("random init");
    let random_init_top1 = linear_evaluate(&scratch, data, &eval).expect("random-init evaluation").top1;
    let random_init_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let switch = base.stage_switch_epoch;
    let prefix_dir = root.join(format!("seed{seed}/prefix"));
    let prefix_cfg = TrainConfig {
        stage_switch_epoch: base.epochs,
        ..base.clone()
    };
    run_pretrain(
        &prefix_cfg,
        data,
        RunOptions {
            out_dir: prefix_dir.clone(),
            resume: None,
            stop_after_epoch: Some(switch),
        },
    )
    .expect("stage-one prefix");
    let prefix = Checkpoint::load(&checkpoint_path(&prefix_dir, switch)).expect("prefix checkpoint");
    let prefix_seconds = start.elapsed().as_secs_f64();

    let sweep = K_VALUES
        .iter()
        .map(|&k| {
            let cfg = TrainConfig { k, ..base.clone() };
            continue_from(&prefix, &cfg, data, &eval, &root.join(format!("seed{seed}/k{k}")))
        })
        .collect();
    let without_mining = continue_from(&prefix, &prefix_cfg, data, &eval, &root.join(format!("seed{seed}/no_pm")));

    let runs = SeedRuns {
        prefix_seconds,
        random_init_top1,
        random_init_seconds,
        sweep,
        without_mining,
    };
    println!(
        "seed {seed}: random init {:.3}, w/o PM {:.3}, K sweep {:?}",
        runs.random_init_top1,
        runs.without_mining.top1,
        runs.sweep.iter().map(|e| (e.top1 * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    runs
}

/// Trains and evaluates every seed once per test process.
pub fn shared_runs() -> &'static SharedRuns {
    static RUNS: OnceLock<SharedRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let _guard = heavy_lock();
        let data = dataset();
        let dir = tempfile::tempdir().expect("temporary directory");
        let seeds = SEEDS.iter().map(|&s| run_seed(s, &data, dir.path())).collect();
        SharedRuns { seeds }
    })
}
