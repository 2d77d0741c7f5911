//! Configuration loading, run directories and artifact I/O.

mod gradcheck;
mod plot;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use gradcheck::{grad_check, Family, FamilyResult, GradCheckReport, GRAD_CHECK_THRESHOLD};
pub use plot::{line_chart_svg, plot_metrics, PlotPair};

use crate::diffnet::Container;
use crate::env::write_trajectory_jsonl;
use crate::error::{Error, Result};
use crate::intention::write_embeddings_csv;
use crate::scalar::Scalar;
use crate::trainer::{checkpoint_precision, evaluate, run_training, EvalResult, Precision, RunMetrics, TrainConfig, Trainer};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.cpig";
pub const LOCK_FILE: &str = ".lock";

fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Reads a JSON document (or `{}` when `path` is `None`), applies dotted
/// `key=value` overrides, fills defaults and validates ranges.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err("config", format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| config_err("config", format!("{} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !doc.is_object() {
        return Err(config_err("config", "top level must be a JSON object"));
    }
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| config_err(o.clone(), "override must look like key=value"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(config_err(o.clone(), "override has an empty key"));
        }
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        set_path(&mut doc, key, value)?;
    }
    let defaults = serde_json::to_value(TrainConfig::default())?;
    check_keys(&doc, &defaults, "")?;
    let cfg: TrainConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let key = e.path().to_string();
        config_err(key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(parts[..i].join("."), "is not an object and cannot take nested overrides"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

fn check_keys(doc: &Value, defaults: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(d), Value::Object(allowed)) = (doc, defaults) {
        for (k, v) in d {
            let dotted = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match allowed.get(k) {
                Some(sub) => check_keys(v, sub, &dotted)?,
                None => return Err(config_err(dotted, "unknown key")),
            }
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Reproduction record written next to every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub package: String,
    pub version: String,
    pub seed: u64,
    pub precision: Precision,
    pub command: String,
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, command: &str) -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.trainer.seed,
            precision: cfg.trainer.precision,
            command: command.to_string(),
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::InvalidArgument(format!("{} is in use by another command (remove {} if stale)", dir.display(), path.display())))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Trains into `dir`: resolved config, manifest, metrics CSV, checkpoints.
pub fn train_into(cfg: &TrainConfig, dir: &Path) -> Result<RunMetrics> {
    let _lock = RunLock::acquire(dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    write_json(&dir.join(MANIFEST_FILE), &RunManifest::new(cfg, "train"))?;
    run_training(cfg, Some(dir))
}

/// What to do with a loaded checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointTask {
    Evaluate,
    Embeddings,
    Trajectories,
}

/// Output of [`run_checkpoint`].
#[derive(Clone, Debug)]
pub struct CheckpointOutput {
    pub eval: EvalResult,
    /// CSV or JSON-lines text for the export tasks.
    pub export: Option<String>,
}

fn run_checkpoint_typed<T: Scalar>(c: &Container, task: CheckpointTask, episodes: usize, seed: u64) -> Result<CheckpointOutput> {
    let trainer = Trainer::<T>::from_checkpoint(c)?;
    match task {
        CheckpointTask::Evaluate => Ok(CheckpointOutput {
            eval: trainer.evaluate(episodes, seed)?,
            export: None,
        }),
        CheckpointTask::Embeddings => {
            if trainer.config().trainer.ablation.no_ig {
                return Err(Error::InvalidArgument("run was trained without the intention learner".into()));
            }
            let mut ctl = trainer.controller().recording_embeddings();
            let eval = evaluate(&mut ctl, &trainer.config().env, episodes, seed, false)?;
            let mut out = Vec::new();
            write_embeddings_csv(&mut out, ctl.embeddings.as_deref().unwrap_or(&[]))?;
            Ok(CheckpointOutput {
                eval,
                export: Some(String::from_utf8(out).map_err(|e| Error::Format(e.to_string()))?),
            })
        }
        CheckpointTask::Trajectories => {
            let eval = evaluate(&mut trainer.controller(), &trainer.config().env, episodes, seed, true)?;
            let mut out = Vec::new();
            for ep in &eval.trajectories {
                write_trajectory_jsonl(&mut out, ep)?;
            }
            Ok(CheckpointOutput {
                eval,
                export: Some(String::from_utf8(out).map_err(|e| Error::Format(e.to_string()))?),
            })
        }
    }
}

/// Loads a trainer checkpoint at its recorded precision and runs `task`.
pub fn run_checkpoint(path: &Path, task: CheckpointTask, episodes: usize, seed: u64) -> Result<CheckpointOutput> {
    let c = Container::load(path)?;
    match checkpoint_precision(&c)? {
        Precision::F64 => run_checkpoint_typed::<f64>(&c, task, episodes, seed),
        Precision::F32 => run_checkpoint_typed::<f32>(&c, task, episodes, seed),
    }
}

/// Writes `return.svg` and `coverage.svg` for a metrics CSV.
pub fn plot_into(metrics_csv: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(metrics_csv)?;
    let plots = plot_metrics(&text)?;
    fs::create_dir_all(dir)?;
    let ret = dir.join("return.svg");
    let cov = dir.join("coverage.svg");
    fs::write(&ret, plots.returns)?;
    fs::write(&cov, plots.coverage)?;
    Ok(vec![ret, cov])
}
