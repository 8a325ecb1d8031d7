//! Run directories: manifest, metrics CSV, evolution log and checkpoints for
//! one training run, plus resuming from the latest checkpoint.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRow, MetricsWriter};
use crate::trainer::{EvalReport, Trainer};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const EVOLUTION_LOG: &str = "evolution.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "checkpoints/diagnostic.ckpt";

pub fn version_string() -> String {
    format!("{}-{}", env!("CARGO_PKG_VERSION"), env!("EPO_GIT_DESCRIBE"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub label: Option<String>,
    pub seed: u64,
    pub config: TrainConfig,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub iterations: u64,
    pub env_steps: u64,
    pub metrics: String,
    pub evolution_log: String,
    /// Relative paths, oldest first.
    pub checkpoints: Vec<String>,
    pub final_checkpoint: Option<String>,
    pub diagnostic_checkpoint: Option<String>,
    pub final_eval: Option<EvalReport>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::rename(&tmp, dir.join(MANIFEST))?;
        Ok(())
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Continue from the newest checkpoint in an existing run directory.
    pub resume: bool,
    pub on_iteration: Option<&'a mut dyn FnMut(&MetricsRow)>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

fn periodic_name(iteration: u64) -> String {
    format!("{CHECKPOINT_DIR}/iter_{iteration:07}.ckpt")
}

/// Keeps the header and the rows of the first `iterations` iterations.
fn truncate_metrics(path: &Path, iterations: u64) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|f| f.parse::<u64>().ok())
                .is_some_and(|it| it <= iterations);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

/// Events are stamped with the iteration count before the step that ran
/// them, so an event belongs to the first `iterations` steps iff its stamp
/// is below `iterations`.
fn truncate_events(path: &Path, iterations: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["iteration"].as_u64().is_some_and(|it| it < iterations) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

fn start_fresh(config: &TrainConfig, dir: &Path) -> Result<(Trainer, RunManifest)> {
    let trainer = Trainer::new(config.clone())?;
    std::fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    MetricsWriter::create(&dir.join(METRICS))?;
    std::fs::write(dir.join(EVOLUTION_LOG), "")?;
    let manifest = RunManifest {
        version: version_string(),
        label: config.run.label.clone(),
        seed: config.run.seed,
        config: config.clone(),
        started_at: now(),
        finished_at: None,
        status: RunStatus::Running,
        error: None,
        iterations: 0,
        env_steps: 0,
        metrics: METRICS.into(),
        evolution_log: EVOLUTION_LOG.into(),
        checkpoints: Vec::new(),
        final_checkpoint: None,
        diagnostic_checkpoint: None,
        final_eval: None,
    };
    manifest.write(dir)?;
    Ok((trainer, manifest))
}

fn resume_from(dir: &Path) -> Result<(Trainer, RunManifest)> {
    let mut manifest = RunManifest::read(dir)?;
    let latest = manifest
        .checkpoints
        .iter()
        .rev()
        .find(|c| dir.join(c).exists())
        .cloned();
    let trainer = match latest {
        Some(c) => Trainer::load_checkpoint(&dir.join(c))?,
        None => Trainer::new(manifest.config.clone())?,
    };
    if trainer.iteration() == 0 {
        MetricsWriter::create(&dir.join(METRICS))?;
        std::fs::write(dir.join(EVOLUTION_LOG), "")?;
    } else {
        truncate_metrics(&dir.join(METRICS), trainer.iteration())?;
        truncate_events(&dir.join(EVOLUTION_LOG), trainer.iteration())?;
    }
    manifest.checkpoints.retain(|c| dir.join(c).exists());
    manifest.status = RunStatus::Running;
    manifest.error = None;
    manifest.finished_at = None;
    manifest.final_checkpoint = None;
    manifest.final_eval = None;
    manifest.iterations = trainer.iteration();
    manifest.env_steps = trainer.env_steps();
    manifest.write(dir)?;
    Ok((trainer, manifest))
}

/// Trains to completion inside `dir`. On a mid-run error the trainer state
/// is saved as a diagnostic checkpoint, the manifest is marked failed, and
/// the error is returned.
pub fn train_run(config: &TrainConfig, dir: &Path, mut opts: RunOptions<'_>) -> Result<RunOutcome> {
    config.validate()?;
    let (mut trainer, mut manifest) = if opts.resume && dir.join(MANIFEST).exists() {
        resume_from(dir)?
    } else {
        start_fresh(config, dir)?
    };
    let mut writer = MetricsWriter::append(&dir.join(METRICS))?;
    let every = trainer.config().run.checkpoint_every;

    let result = (|| -> Result<()> {
        while !trainer.is_finished() {
            let report = trainer.step()?;
            writer.write(&report.metrics)?;
            if let Some(event) = &report.event {
                metrics::append_json_line(&dir.join(EVOLUTION_LOG), event)?;
            }
            if let Some(cb) = opts.on_iteration.as_mut() {
                cb(&report.metrics);
            }
            if every > 0 && trainer.iteration() % every == 0 && !trainer.is_finished() {
                let name = periodic_name(trainer.iteration());
                trainer.save_checkpoint(&dir.join(&name))?;
                manifest.checkpoints.push(name);
                manifest.iterations = trainer.iteration();
                manifest.env_steps = trainer.env_steps();
                manifest.write(dir)?;
            }
        }
        Ok(())
    })();

    manifest.iterations = trainer.iteration();
    manifest.env_steps = trainer.env_steps();
    if let Err(e) = result {
        manifest.status = RunStatus::Failed;
        manifest.error = Some(e.to_string());
        if trainer.save_checkpoint(&dir.join(DIAGNOSTIC_CHECKPOINT)).is_ok() {
            manifest.diagnostic_checkpoint = Some(DIAGNOSTIC_CHECKPOINT.into());
        }
        manifest.finished_at = Some(now());
        manifest.write(dir)?;
        return Err(e);
    }

    trainer.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
    manifest.checkpoints.push(FINAL_CHECKPOINT.into());
    manifest.final_checkpoint = Some(FINAL_CHECKPOINT.into());
    let run = &trainer.config().run;
    if run.eval_episodes > 0 {
        manifest.final_eval = Some(trainer.evaluate(run.eval_episodes, run.seed, false)?);
    }
    manifest.status = RunStatus::Completed;
    manifest.finished_at = Some(now());
    manifest.write(dir)?;
    Ok(RunOutcome { dir: dir.to_path_buf(), manifest })
}
