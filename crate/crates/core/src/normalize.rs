use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const NORM_EPS: f64 = 1e-8;
pub const NORM_CLIP: f64 = 10.0;

/// Running per-dimension mean and variance, merged batch-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        RunningNormalizer {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Merges the statistics of `batch` (one observation per row).
    pub fn update(&mut self, batch: &Mat) -> Result<()> {
        if batch.cols() != self.dim() {
            return Err(Error::shape("normalizer update", self.dim(), batch.cols()));
        }
        let n = batch.rows();
        if n == 0 {
            return Ok(());
        }
        let bc = n as f64;
        let mut bmean = vec![0.0; self.dim()];
        for row in batch.row_iter() {
            for (m, &x) in bmean.iter_mut().zip(row) {
                *m += x;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= bc);
        let mut bvar = vec![0.0; self.dim()];
        for row in batch.row_iter() {
            for ((v, &x), &m) in bvar.iter_mut().zip(row).zip(&bmean) {
                *v += (x - m) * (x - m);
            }
        }
        bvar.iter_mut().for_each(|v| *v /= bc);

        let total = self.count + bc;
        for d in 0..self.dim() {
            let delta = bmean[d] - self.mean[d];
            let m2 = self.var[d] * self.count + bvar[d] * bc + delta * delta * self.count * bc / total;
            self.mean[d] += delta * bc / total;
            self.var[d] = m2 / total;
        }
        self.count = total;
        Ok(())
    }

    pub fn normalize(&self, obs: &Mat) -> Result<Mat> {
        if obs.cols() != self.dim() {
            return Err(Error::shape("normalizer input", self.dim(), obs.cols()));
        }
        let mut out = obs.clone();
        for row in out.data_mut().chunks_exact_mut(self.dim()) {
            for ((x, &m), &v) in row.iter_mut().zip(&self.mean).zip(&self.var) {
                *x = ((*x - m) / (v + NORM_EPS).sqrt()).clamp(-NORM_CLIP, NORM_CLIP);
            }
        }
        Ok(out)
    }

    /// Unclamped scalar form for value targets (dimension 0 only).
    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean[0]) / (self.var[0] + NORM_EPS).sqrt()
    }

    pub fn destandardize(&self, y: f64) -> f64 {
        y * (self.var[0] + NORM_EPS).sqrt() + self.mean[0]
    }

    pub fn update_scalars(&mut self, xs: &[f64]) -> Result<()> {
        self.update(&Mat::from_vec(xs.len(), 1, xs.to_vec())?)
    }
}
