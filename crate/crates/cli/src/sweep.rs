//! One child `epo train` process per (axis value, seed), then an aggregate
//! CSV of final and best master return with mean and standard error.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use epo_core::metrics::read_table;
use serde::Serialize;

use crate::stats::{final_and_best, mean_stderr};
use crate::{load_config, runtime, CliError, SweepArgs};

pub const AGGREGATE: &str = "aggregate.csv";
pub const SWEEP_LOG: &str = "sweep.json";
const METRIC: &str = "master_mean_return";

pub fn parse_axis(axis: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = axis
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--axis must look like KEY=V1,V2, got `{axis}`")))?;
    let values: Vec<String> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(CliError::Usage(format!("--axis needs a key and at least one value, got `{axis}`")));
    }
    Ok((key.trim().to_string(), values))
}

#[derive(Debug, Serialize)]
struct Cell {
    value: String,
    seed: u64,
    dir: PathBuf,
    exit_code: Option<i32>,
}

fn cell_dir(out: &Path, key: &str, value: &str, index: u64) -> PathBuf {
    out.join(format!("{key}={}", value.replace(['/', '\\'], "_"))).join(format!("seed_{index}"))
}

fn spawn(args: &SweepArgs, key: &str, cell: &Cell) -> Result<Child, CliError> {
    std::fs::create_dir_all(&cell.dir).map_err(runtime)?;
    let log = File::create(cell.dir.join("stderr.log")).map_err(runtime)?;
    let exe = std::env::current_exe().map_err(runtime)?;
    let mut cmd = Command::new(exe);
    cmd.arg("train");
    if let Some(c) = &args.config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--seed")
        .arg(cell.seed.to_string())
        .arg("--out")
        .arg(&cell.dir)
        .arg("--quiet")
        .args(&args.overrides)
        .arg(format!("{key}={}", cell.value))
        .stdout(Stdio::null())
        .stderr(log);
    cmd.spawn().map_err(runtime)
}

pub fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let (key, values) = parse_axis(&args.axis)?;
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    for v in &values {
        let mut o = args.overrides.clone();
        o.push(format!("{key}={v}"));
        load_config(args.config.as_deref(), &o)?;
    }
    std::fs::create_dir_all(&args.out).map_err(runtime)?;

    let mut cells: Vec<Cell> = Vec::new();
    for v in &values {
        for i in 0..args.seeds {
            cells.push(Cell {
                value: v.clone(),
                seed: base.run.seed + i,
                dir: cell_dir(&args.out, &key, v, i),
                exit_code: None,
            });
        }
    }

    let parallel = args.parallel.max(1);
    let mut running: Vec<(usize, Child)> = Vec::new();
    for idx in 0..cells.len() {
        if running.len() == parallel {
            let (i, mut child) = running.remove(0);
            cells[i].exit_code = child.wait().map_err(runtime)?.code();
        }
        running.push((idx, spawn(&args, &key, &cells[idx])?));
    }
    for (i, mut child) in running {
        cells[i].exit_code = child.wait().map_err(runtime)?.code();
    }

    let mut w = csv_writer(&args.out.join(AGGREGATE))?;
    w.write_record([
        "axis", "value", "seeds_ok", "seeds_failed", "final_mean", "final_stderr", "best_mean", "best_stderr",
    ])
    .map_err(runtime)?;
    let mut failed = 0usize;
    for v in &values {
        let mut finals = Vec::new();
        let mut bests = Vec::new();
        let mut bad = 0usize;
        let mut ok = 0usize;
        for c in cells.iter().filter(|c| &c.value == v) {
            ok += (c.exit_code == Some(0)) as usize;
            let summary = (c.exit_code == Some(0))
                .then(|| read_table(&c.dir.join(epo_core::run::METRICS)).ok())
                .flatten()
                .and_then(|t| t.column(METRIC))
                .and_then(|col| final_and_best(&col));
            match summary {
                Some((f, b)) => {
                    finals.push(f);
                    bests.push(b);
                }
                None if c.exit_code == Some(0) => {}
                None => bad += 1,
            }
        }
        failed += bad;
        let (fm, fs) = mean_stderr(&finals);
        let (bm, bs) = mean_stderr(&bests);
        w.write_record([
            key.clone(),
            v.clone(),
            ok.to_string(),
            bad.to_string(),
            fm.to_string(),
            fs.to_string(),
            bm.to_string(),
            bs.to_string(),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    std::fs::write(
        args.out.join(SWEEP_LOG),
        serde_json::to_string_pretty(&serde_json::json!({"axis": key, "cells": cells})).map_err(runtime)? + "\n",
    )
    .map_err(runtime)?;

    println!("{}", args.out.join(AGGREGATE).display());
    if failed > 0 {
        return Err(CliError::Partial(format!("{failed} of {} child runs failed", cells.len())));
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(runtime)
}
