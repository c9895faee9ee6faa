//! Forecast quality measures: per-horizon MAE / RMSE / MAPE reports,
//! a binned KL divergence between truth and prediction distributions,
//! and the historical-average baseline forecaster.

use crate::data::TrafficDataset;
use crate::error::{Error, Result};
use crate::temporal::{TimeStamp, SLOTS_PER_DAY};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Truth magnitudes below this are excluded from MAPE so near-zero
/// readings cannot blow the percentage up.
pub const MAPE_FLOOR: f64 = 1e-6;

/// Error statistics at one forecast horizon (`steps` intervals ahead).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub steps: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Mean absolute percentage error, in percent.
    pub mape: f64,
    /// Points excluded from MAPE because the truth was near zero.
    pub mape_skipped: usize,
}

/// Metrics per requested horizon plus the average over every
/// predicted step of every window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizons: Vec<HorizonMetrics>,
    pub overall: HorizonMetrics,
}

struct ErrorAccumulator {
    abs_sum: f64,
    sq_sum: f64,
    pct_sum: f64,
    count: usize,
    pct_count: usize,
    skipped: usize,
}

impl ErrorAccumulator {
    fn new() -> Self {
        ErrorAccumulator {
            abs_sum: 0.0,
            sq_sum: 0.0,
            pct_sum: 0.0,
            count: 0,
            pct_count: 0,
            skipped: 0,
        }
    }

    fn push(&mut self, pred: f64, truth: f64) {
        let err = pred - truth;
        self.abs_sum += err.abs();
        self.sq_sum += err * err;
        self.count += 1;
        if truth.abs() < MAPE_FLOOR {
            self.skipped += 1;
        } else {
            self.pct_sum += (err / truth).abs();
            self.pct_count += 1;
        }
    }

    fn finish(&self, steps: usize) -> HorizonMetrics {
        let n = self.count.max(1) as f64;
        HorizonMetrics {
            steps,
            mae: self.abs_sum / n,
            rmse: (self.sq_sum / n).sqrt(),
            mape: if self.pct_count == 0 {
                0.0
            } else {
                100.0 * self.pct_sum / self.pct_count as f64
            },
            mape_skipped: self.skipped,
        }
    }
}

/// Compare predictions against ground truth. Both lists hold one
/// `[q, n, c]` tensor per evaluation window; `horizon_steps` picks the
/// steps-ahead slices to report individually (e.g. 3, 6, and 12 for
/// 15/30/60-minute horizons at 5-minute resolution).
pub fn compute_metrics(
    preds: &[Tensor],
    truths: &[Tensor],
    horizon_steps: &[usize],
) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::contract(format!(
            "metrics need matching non-empty lists, got {} predictions and {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let shape = preds[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::contract(format!(
            "metrics expect [q, n, c] windows, got {shape:?}"
        )));
    }
    let q = shape[0];
    let per_step = shape[1] * shape[2];
    if horizon_steps.is_empty() {
        return Err(Error::contract("no horizon steps requested"));
    }
    for &h in horizon_steps {
        if h == 0 || h > q {
            return Err(Error::contract(format!(
                "horizon step {h} outside the predicted range 1..={q}"
            )));
        }
    }

    let mut per_horizon: Vec<ErrorAccumulator> =
        horizon_steps.iter().map(|_| ErrorAccumulator::new()).collect();
    let mut overall = ErrorAccumulator::new();
    for (p, t) in preds.iter().zip(truths) {
        if p.shape() != shape || t.shape() != shape {
            return Err(Error::contract(format!(
                "inconsistent window shapes: expected {shape:?}, got {:?} and {:?}",
                p.shape(),
                t.shape()
            )));
        }
        for (pv, tv) in p.data().iter().zip(t.data()) {
            overall.push(*pv, *tv);
        }
        for (acc, &h) in per_horizon.iter_mut().zip(horizon_steps) {
            let off = (h - 1) * per_step;
            for i in off..off + per_step {
                acc.push(p.data()[i], t.data()[i]);
            }
        }
    }

    Ok(MetricReport {
        horizons: per_horizon
            .iter()
            .zip(horizon_steps)
            .map(|(acc, &h)| acc.finish(h))
            .collect(),
        overall: overall.finish(0),
    })
}

/// KL divergence `KL(truth ‖ pred)` between the two value
/// distributions, estimated on `bins` equal-width bins spanning the
/// pooled range of both samples. Empty prediction bins get probability
/// 1e-9 so the divergence stays finite; a zero-width pooled range
/// (all values identical) gives 0. Natural log.
pub fn kl_divergence(pred: &[f64], truth: &[f64], bins: usize) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::contract("KL divergence needs non-empty samples"));
    }
    if bins == 0 {
        return Err(Error::contract("KL divergence needs at least one bin"));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "kl_divergence",
            detail: None,
        });
    }
    let lo = pred
        .iter()
        .chain(truth)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = pred
        .iter()
        .chain(truth)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(0.0);
    }
    let width = (hi - lo) / bins as f64;
    let histogram = |vals: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &v in vals {
            // The top edge is right-inclusive so the maximum lands in
            // the last bin instead of overflowing.
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            h[idx] += 1.0;
        }
        let n = vals.len() as f64;
        h.iter().map(|&c| c / n).collect()
    };
    let p = histogram(truth);
    let q = histogram(pred);
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        if *pi > 0.0 {
            kl += pi * (pi / qi.max(1e-9)).ln();
        }
    }
    Ok(kl)
}

/// Baseline forecaster: the mean training-split speed for each
/// (vertex, weekly time slot) pair. Slots never seen in training fall
/// back to the vertex's overall training mean.
#[derive(Debug, Clone)]
pub struct HistoricalAverage {
    n: usize,
    c: usize,
    table: HashMap<(usize, usize), Vec<f64>>,
    vertex_mean: Vec<f64>,
}

impl HistoricalAverage {
    /// Fit on the first `t_end` timestamps of the dataset (the
    /// training split).
    pub fn fit(ds: &TrafficDataset, t_end: usize) -> Result<Self> {
        if t_end == 0 || t_end > ds.len() {
            return Err(Error::contract(format!(
                "historical average needs 1..={} training steps, got {t_end}",
                ds.len()
            )));
        }
        let n = ds.n();
        let c = ds.conditions();
        let mut sums: HashMap<(usize, usize), (Vec<f64>, usize)> = HashMap::new();
        let mut vertex_sum = vec![0.0; n * c];
        for t in 0..t_end {
            let stamp = ds.stamps()[t];
            let key_time = stamp.day * SLOTS_PER_DAY + stamp.slot;
            let row = ds.row(t);
            for v in 0..n {
                let entry = sums
                    .entry((v, key_time))
                    .or_insert_with(|| (vec![0.0; c], 0));
                for ch in 0..c {
                    entry.0[ch] += row[v * c + ch];
                    vertex_sum[v * c + ch] += row[v * c + ch];
                }
                entry.1 += 1;
            }
        }
        let table = sums
            .into_iter()
            .map(|(k, (sum, count))| (k, sum.iter().map(|s| s / count as f64).collect()))
            .collect();
        let vertex_mean = vertex_sum.iter().map(|s| s / t_end as f64).collect();
        Ok(HistoricalAverage {
            n,
            c,
            table,
            vertex_mean,
        })
    }

    /// Predict a `[q, n, c]` window for the given horizon timestamps.
    pub fn predict(&self, horizons: &[TimeStamp]) -> Result<Tensor> {
        if horizons.is_empty() {
            return Err(Error::contract("no horizons requested"));
        }
        let (n, c) = (self.n, self.c);
        let mut data = Vec::with_capacity(horizons.len() * n * c);
        for stamp in horizons {
            let key_time = stamp.day * SLOTS_PER_DAY + stamp.slot;
            for v in 0..n {
                match self.table.get(&(v, key_time)) {
                    Some(means) => data.extend_from_slice(means),
                    None => data.extend_from_slice(&self.vertex_mean[v * c..(v + 1) * c]),
                }
            }
        }
        Tensor::new(vec![horizons.len(), n, c], data)
    }
}
