//! Command-line entry point. Exit codes: 0 success, 1 runtime failure,
//! 2 bad arguments or configuration.

pub mod experiment;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::checks::run_gradcheck_suite;
use crate::error::{Error, Result};
use crate::evaluation::{
    export_embeddings, file_hash, finetune_evaluate, linear_evaluate, mining_precision, scratch_model, EvalConfig,
};
use crate::model::{Checkpoint, ModelParams};
use crate::skeleton::{load_dataset, save_dataset, synthesize, Dataset, SynthConfig};
use crate::trainer::{run_pretrain, RunOptions, TrainConfig, TrainState};

use experiment::{summarize, summary_table, sweep, SweepParam};

#[derive(Debug, Parser)]
#[command(name = "cpm", version, about = "Contrastive positive mining for skeleton action representations")]
pub struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, `dotted.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for `manifest.json` and `data.skel`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Linear classifier on frozen encoder features.
    EvalLinear {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning of encoder and classifier.
    EvalFinetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Pretrained checkpoint; omit together with `--scratch` for a
        /// randomly initialized encoder.
        #[arg(long, required_unless_present = "scratch")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scratch: bool,
        /// Training config supplying the architecture in scratch mode.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mining precision of one or more frozen checkpoints.
    MinePrecision {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Positives per sample; defaults to the checkpoint's K.
        #[arg(long)]
        k: Option<usize>,
        /// Queue size; defaults to the checkpoint's N.
        #[arg(long)]
        queue_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one training parameter over several values and seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// `k`, `tau_prime` or `stage_switch_epoch`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Evaluation config file.
        #[arg(long)]
        eval_config: Option<PathBuf>,
        /// Override one evaluation value (repeatable).
        #[arg(long = "eval-set", value_name = "KEY=VALUE")]
        eval_overrides: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the values of each seed on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Write eval-mode features of every sample to an `EMBD` file.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Clip length; defaults to the checkpoint's crop length.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive and both losses.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses, otherwise as a string.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config("empty override key".into()))
}

/// Defaults, then the config file, then each override in order.
pub fn resolve_config<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let from_file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, from_file);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if ds.is_empty() {
        return Err(Error::invalid(format!("{} holds no samples", path.display())));
    }
    Ok(ds)
}

/// Model weights plus the training config echoed into the checkpoint, if any.
fn load_model(path: &Path) -> Result<(ModelParams, Option<TrainConfig>)> {
    let ck = Checkpoint::load(path)?;
    let value: Value = serde_json::from_str(&ck.config_json)?;
    let train = value.get("train").cloned().map(serde_json::from_value).transpose()?;
    Ok((ModelParams::from_checkpoint(&ck)?, train))
}

fn eval_defaults(train: Option<&TrainConfig>) -> EvalConfig {
    EvalConfig {
        frames: train.map_or(EvalConfig::default().frames, |t| t.augmentation.output_length),
        ..EvalConfig::default()
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, classes, per_class, seed, out } => {
            let mut cfg = resolve_config(SynthConfig::default(), config.config.as_deref(), &config.overrides)?;
            cfg.num_classes = classes.unwrap_or(cfg.num_classes);
            cfg.samples_per_class = per_class.unwrap_or(cfg.samples_per_class);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let ds = synthesize(&cfg).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Config(m),
                other => other,
            })?;
            fs::create_dir_all(&out)?;
            save_dataset(&out.join("manifest.json"), &ds)?;
            write_json(&out.join("synth_config.json"), &cfg)?;
            log::info!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Pretrain { config, data, out, resume, stop_after_epoch } => {
            let cfg = resolve_config(TrainConfig::default(), config.config.as_deref(), &config.overrides)?;
            cfg.validate()?;
            let ds = load_data(&data)?;
            let resume = resume
                .map(|p| Checkpoint::load(&p).and_then(|ck| TrainState::from_checkpoint(&ck)).map(|(s, _)| s))
                .transpose()?;
            let outcome = run_pretrain(&cfg, &ds, RunOptions { out_dir: out, resume, stop_after_epoch })?;
            log::info!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::EvalLinear { config, checkpoint, data, out } => {
            let (params, train) = load_model(&checkpoint)?;
            let cfg = resolve_config(eval_defaults(train.as_ref()), config.config.as_deref(), &config.overrides)?;
            cfg.validate()?;
            let ds = load_data(&data)?;
            let mut report = linear_evaluate(&params, &ds, &cfg)?;
            report.checkpoint_hash = Some(file_hash(&checkpoint)?);
            write_json(&out.join("eval_linear.json"), &report)?;
            println!("linear top-1 {:.4}", report.top1);
        }
        Command::EvalFinetune { config, checkpoint, scratch, train_config, data, out } => {
            let ds = load_data(&data)?;
            let (params, train, hash) = match (checkpoint, scratch) {
                (Some(_), true) => return Err(Error::Config("--checkpoint and --scratch are exclusive".into())),
                (Some(path), false) => {
                    let (p, t) = load_model(&path)?;
                    (p, t, Some(file_hash(&path)?))
                }
                (None, _) => {
                    let t = resolve_config(TrainConfig::default(), train_config.as_deref(), &[])?;
                    (scratch_model(&t.model, &ds, t.seed)?, Some(t), None)
                }
            };
            let cfg = resolve_config(eval_defaults(train.as_ref()), config.config.as_deref(), &config.overrides)?;
            cfg.validate()?;
            let (mut report, _) = finetune_evaluate(&params, &ds, &cfg)?;
            report.checkpoint_hash = hash;
            write_json(&out.join("eval_finetune.json"), &report)?;
            println!("finetune top-1 {:.4}", report.top1);
        }
        Command::MinePrecision { checkpoint, data, k, queue_size, seed, out } => {
            let ds = load_data(&data)?;
            let mut rows = Vec::new();
            for path in &checkpoint {
                let (params, train) = load_model(path)?;
                let train = train.unwrap_or_default();
                let k = k.unwrap_or(train.k);
                let n = queue_size.unwrap_or(train.queue_size);
                let p = mining_precision(&params, &ds, k, n, train.batch_size, train.augmentation.output_length, seed)?;
                println!("{}\t{p:.4}", path.display());
                rows.push(serde_json::json!({
                    "checkpoint": path,
                    "checkpoint_hash": file_hash(path)?,
                    "k": k,
                    "queue_size": n,
                    "precision": p,
                }));
            }
            write_json(&out.join("mining_precision.json"), &rows)?;
        }
        Command::Ablate { config, param, values, seeds, eval_config, eval_overrides, data, out, parallel } => {
            let param = SweepParam::parse(&param)?;
            let base = resolve_config(TrainConfig::default(), config.config.as_deref(), &config.overrides)?;
            base.validate()?;
            let eval = resolve_config(eval_defaults(Some(&base)), eval_config.as_deref(), &eval_overrides)?;
            eval.validate()?;
            let ds = load_data(&data)?;
            write_json(
                &out.join("ablate_config.json"),
                &serde_json::json!({
                    "param": param.name(),
                    "values": values,
                    "seeds": seeds,
                    "train": base,
                    "eval": eval,
                }),
            )?;
            let runs = sweep(&base, param, &values, &seeds, &ds, &eval, &out, parallel)?;
            let rows = summarize(&runs);
            write_json(&out.join("runs.json"), &runs)?;
            write_json(&out.join("summary.json"), &rows)?;
            let table = summary_table(param, &rows);
            fs::write(out.join("summary.md"), &table)?;
            print!("{table}");
        }
        Command::ExportEmbeddings { checkpoint, data, frames, out } => {
            let (params, train) = load_model(&checkpoint)?;
            let frames = frames.unwrap_or(eval_defaults(train.as_ref()).frames);
            let n = export_embeddings(&params, &load_data(&data)?, frames, &out)?;
            log::info!("wrote {n} embeddings to {}", out.display());
        }
        Command::Gradcheck { points, seed, out } => {
            let results = run_gradcheck_suite(points, seed)?;
            let mut failed = Vec::new();
            for r in &results {
                println!("{:<20} {:.3e} {}", r.name, r.max_error, if r.passed() { "ok" } else { "FAIL" });
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            if let Some(path) = out {
                write_json(&path, &results)?;
            }
            if !failed.is_empty() {
                return Err(Error::CheckFailed(format!("gradients of {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
