//! Per-iteration metrics rows and the CSV they are written to.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 19] = [
    "iteration",
    "env_steps",
    "lr",
    "approx_kl",
    "loss_total",
    "loss_actor_on",
    "loss_actor_off",
    "loss_critic_on",
    "loss_critic_off",
    "entropy",
    "bounds",
    "clip_frac_on",
    "clip_frac_off",
    "master_mean_return",
    "fitness_min",
    "fitness_median",
    "fitness_max",
    "evolved",
    "offpolicy_dropped",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub env_steps: u64,
    pub lr: f64,
    pub approx_kl: f64,
    pub loss_total: f64,
    pub loss_actor_on: f64,
    pub loss_actor_off: f64,
    pub loss_critic_on: f64,
    pub loss_critic_off: f64,
    pub entropy: f64,
    pub bounds: f64,
    pub clip_frac_on: f64,
    pub clip_frac_off: f64,
    pub master_mean_return: f64,
    pub fitness_min: f64,
    pub fitness_median: f64,
    pub fitness_max: f64,
    pub evolved: bool,
    pub offpolicy_dropped: u64,
}

impl MetricsRow {
    /// Fields in header order. Floats use the shortest round-trip form.
    pub fn to_fields(&self) -> Vec<String> {
        let f = |v: f64| format!("{v}");
        vec![
            self.iteration.to_string(),
            self.env_steps.to_string(),
            f(self.lr),
            f(self.approx_kl),
            f(self.loss_total),
            f(self.loss_actor_on),
            f(self.loss_actor_off),
            f(self.loss_critic_on),
            f(self.loss_critic_off),
            f(self.entropy),
            f(self.bounds),
            f(self.clip_frac_on),
            f(self.clip_frac_off),
            f(self.master_mean_return),
            f(self.fitness_min),
            f(self.fitness_median),
            f(self.fitness_max),
            (self.evolved as u8).to_string(),
            self.offpolicy_dropped.to_string(),
        ]
    }
}

/// Appends rows to a metrics CSV, flushing after each row.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).map_err(csv_err)?;
        inner.write_record(METRICS_HEADER).map_err(csv_err)?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    /// Reopens an existing file for appending (resume).
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter { inner: csv::WriterBuilder::new().from_writer(file) })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.to_fields()).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// A numeric table read back from any CSV the engine writes.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// Non-numeric cells read as NaN.
pub fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(rec.iter().map(|c| c.parse::<f64>().unwrap_or(f64::NAN)).collect());
    }
    Ok(Table { header, rows })
}

/// Appends one JSON object per line.
pub fn append_json_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(value)?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64) -> MetricsRow {
        MetricsRow {
            iteration: i,
            env_steps: i * 1024,
            lr: 1e-4,
            approx_kl: 0.1 + 0.2,
            loss_total: -1.5,
            loss_actor_on: 0.25,
            loss_actor_off: 0.0,
            loss_critic_on: 3.0,
            loss_critic_off: 0.0,
            entropy: 1.4189385332046727,
            bounds: 0.0,
            clip_frac_on: 0.125,
            clip_frac_off: 0.0,
            master_mean_return: f64::NAN,
            fitness_min: f64::NAN,
            fitness_median: f64::NAN,
            fitness_max: f64::NAN,
            evolved: i % 2 == 1,
            offpolicy_dropped: 0,
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&row(1)).unwrap();
        drop(w);
        let mut w = MetricsWriter::append(&path).unwrap();
        w.write(&row(2)).unwrap();
        drop(w);
        let t = read_table(&path).unwrap();
        assert_eq!(t.header, METRICS_HEADER.to_vec());
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.column("approx_kl").unwrap()[0], 0.1 + 0.2);
        assert_eq!(t.column("entropy").unwrap()[1], 1.4189385332046727);
        assert!(t.column("fitness_min").unwrap()[0].is_nan());
        assert_eq!(t.column("evolved").unwrap(), vec![1.0, 0.0]);
    }
}
