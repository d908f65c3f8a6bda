//! Reversible instance normalization over the rows of one C×U window.

use serde::{Deserialize, Serialize};

pub const REVIN_EPS: f64 = 1e-4;

/// Per-variable statistics kept for inversion. `std` already includes the epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevinStats {
    pub mean: f64,
    pub std: f64,
}

impl RevinStats {
    pub fn of(row: &[f64]) -> Self {
        let n = row.len().max(1) as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: (var + REVIN_EPS).sqrt(),
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Normalizes each row of a row-major `c × u` matrix.
pub fn revin_normalize(x: &[f64], c: usize) -> (Vec<f64>, Vec<RevinStats>) {
    let u = x.len() / c.max(1);
    let mut out = Vec::with_capacity(x.len());
    let mut stats = Vec::with_capacity(c);
    for row in x.chunks(u.max(1)).take(c) {
        let s = RevinStats::of(row);
        out.extend(row.iter().map(|&v| s.normalize(v)));
        stats.push(s);
    }
    (out, stats)
}

pub fn revin_denormalize(xn: &[f64], stats: &[RevinStats]) -> Vec<f64> {
    let u = xn.len() / stats.len().max(1);
    xn.chunks(u.max(1))
        .zip(stats)
        .flat_map(|(row, s)| row.iter().map(move |&v| s.denormalize(v)))
        .collect()
}
