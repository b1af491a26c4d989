//! MAE / RMSE / MAPE on raw-scale predictions, overall and per horizon.
//!
//! MAPE masks near-zero ground truth (the flow archives contain zeros) and
//! reports NaN when every entry is masked.

use std::fmt::Write as _;

/// One row of a metric table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; NaN when every entry fell below the mask threshold.
    pub mape: f64,
}

/// Streaming accumulator so batched evaluation and whole-tensor evaluation
/// produce identical numbers.
#[derive(Debug, Clone)]
pub struct MetricAccum {
    horizon: usize,
    mask_threshold: f64,
    abs_sum: Vec<f64>,
    sq_sum: Vec<f64>,
    count: Vec<usize>,
    ape_sum: Vec<f64>,
    ape_count: Vec<usize>,
}

impl MetricAccum {
    pub fn new(horizon: usize, mask_threshold: f64) -> Self {
        MetricAccum {
            horizon,
            mask_threshold,
            abs_sum: vec![0.0; horizon],
            sq_sum: vec![0.0; horizon],
            count: vec![0; horizon],
            ape_sum: vec![0.0; horizon],
            ape_count: vec![0; horizon],
        }
    }

    /// Add a `[M, horizon, N]` block of predictions and targets.
    pub fn add_block(&mut self, pred: &[f64], truth: &[f64], num_nodes: usize) {
        assert_eq!(pred.len(), truth.len());
        assert_eq!(pred.len() % (self.horizon * num_nodes), 0);
        let windows = pred.len() / (self.horizon * num_nodes);
        for w in 0..windows {
            for h in 0..self.horizon {
                let off = (w * self.horizon + h) * num_nodes;
                for i in 0..num_nodes {
                    let p = pred[off + i];
                    let t = truth[off + i];
                    let e = p - t;
                    self.abs_sum[h] += e.abs();
                    self.sq_sum[h] += e * e;
                    self.count[h] += 1;
                    if t >= self.mask_threshold {
                        self.ape_sum[h] += (e / t).abs();
                        self.ape_count[h] += 1;
                    }
                }
            }
        }
    }

    fn row(abs: f64, sq: f64, n: usize, ape: f64, ape_n: usize) -> Metrics {
        Metrics {
            mae: abs / n as f64,
            rmse: (sq / n as f64).sqrt(),
            mape: if ape_n == 0 {
                f64::NAN
            } else {
                100.0 * ape / ape_n as f64
            },
        }
    }

    /// Metrics pooled over every entry.
    pub fn overall(&self) -> Metrics {
        let n: usize = self.count.iter().sum();
        assert!(n > 0, "no entries accumulated");
        Self::row(
            self.abs_sum.iter().sum(),
            self.sq_sum.iter().sum(),
            n,
            self.ape_sum.iter().sum(),
            self.ape_count.iter().sum(),
        )
    }

    /// Metrics per prediction horizon (index 0 = one step ahead).
    pub fn per_horizon(&self) -> Vec<Metrics> {
        (0..self.horizon)
            .map(|h| {
                Self::row(
                    self.abs_sum[h],
                    self.sq_sum[h],
                    self.count[h],
                    self.ape_sum[h],
                    self.ape_count[h],
                )
            })
            .collect()
    }
}

/// Full metric table: per-horizon rows plus the pooled average.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub per_horizon: Vec<Metrics>,
    pub overall: Metrics,
}

impl MetricsTable {
    /// CSV with header `horizon,mae,rmse,mape`; the last row is `avg`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,mae,rmse,mape\n");
        for (h, m) in self.per_horizon.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", h + 1, m.mae, m.rmse, m.mape);
        }
        let m = &self.overall;
        let _ = writeln!(s, "avg,{},{},{}", m.mae, m.rmse, m.mape);
        s
    }
}

/// Metrics of `pred` vs `truth`, both `[M, horizon, N]` in raw units.
pub fn compute_metrics(
    pred: &[f64],
    truth: &[f64],
    horizon: usize,
    num_nodes: usize,
    mask_threshold: f64,
) -> MetricsTable {
    let mut acc = MetricAccum::new(horizon, mask_threshold);
    acc.add_block(pred, truth, num_nodes);
    MetricsTable {
        per_horizon: acc.per_horizon(),
        overall: acc.overall(),
    }
}

/// MAE over entries whose ground truth clears the mask threshold; used as
/// the validation criterion during training.
pub fn masked_mae(pred: &[f64], truth: &[f64], mask_threshold: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if *t >= mask_threshold {
            sum += (p - t).abs();
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
