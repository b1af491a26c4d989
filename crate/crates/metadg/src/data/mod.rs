//! Dataset ingestion, time features, normalization, windowing and batching.
//!
//! The model is graph-free: only the flow tensor is ingested, never a
//! predefined road-network adjacency. Accepted containers are `.npy`
//! (`[T, N]` or `[T, N, C]` with channel 0 = flow) and headerless CSV
//! (rows = time, columns = nodes).

pub mod metrics;
pub mod npy;
pub mod synthetic;

use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Array, Element};

pub use metrics::{compute_metrics, masked_mae, MetricAccum, Metrics, MetricsTable};
pub use synthetic::{make_synthetic, SyntheticSpec};

/// Five-minute slots per day.
pub const SLOTS_PER_DAY: usize = 288;
/// Five-minute slots per week.
pub const SLOTS_PER_WEEK: usize = 2016;

/// A raw flow series: `[T_total, N]` plus its calendar alignment.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub(crate) values: Vec<f32>,
    pub t_total: usize,
    pub num_nodes: usize,
    /// Day-of-week of step 0 (0 = Monday).
    pub start_dow: usize,
    /// Time-of-day slot of step 0.
    pub start_tod_slot: usize,
    pub interval_min: usize,
}

/// Calendar features of one global step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeFeatures {
    /// Slot in [0, 288).
    pub tod_index: usize,
    /// Day in [0, 7), 0 = Monday.
    pub dow_index: usize,
    /// Global step index.
    pub tau: usize,
}

impl RawSeries {
    /// Build a series from a flat `[T_total * N]` row-major buffer. The
    /// calendar starts on a Monday at midnight; adjust the `start_*` fields
    /// for other anchors.
    pub fn from_values(values: Vec<f32>, num_nodes: usize) -> Result<RawSeries> {
        if num_nodes == 0 || !values.len().is_multiple_of(num_nodes) {
            return Err(Error::Data(format!(
                "{} values do not form complete rows of {num_nodes} nodes",
                values.len()
            )));
        }
        Ok(RawSeries {
            t_total: values.len() / num_nodes,
            values,
            num_nodes,
            start_dow: 0,
            start_tod_slot: 0,
            interval_min: 5,
        })
    }

    pub fn value(&self, t: usize, node: usize) -> f32 {
        self.values[t * self.num_nodes + node]
    }

    pub fn time_features(&self, step: usize) -> TimeFeatures {
        let abs = self.start_tod_slot + step;
        TimeFeatures {
            tod_index: abs % SLOTS_PER_DAY,
            dow_index: (self.start_dow + abs / SLOTS_PER_DAY) % 7,
            tau: step,
        }
    }

    /// Replace NaNs by linear interpolation along time (nearest value at the
    /// edges). Errors if a node has no finite value at all.
    pub fn interpolate_missing(&mut self) -> Result<()> {
        let (t_total, n) = (self.t_total, self.num_nodes);
        for node in 0..n {
            let mut t = 0;
            while t < t_total {
                if self.values[t * n + node].is_finite() {
                    t += 1;
                    continue;
                }
                let gap_start = t;
                let mut gap_end = t;
                while gap_end < t_total && !self.values[gap_end * n + node].is_finite() {
                    gap_end += 1;
                }
                let before = gap_start.checked_sub(1).map(|i| self.values[i * n + node]);
                let after = (gap_end < t_total).then(|| self.values[gap_end * n + node]);
                match (before, after) {
                    (Some(b), Some(a)) => {
                        let span = (gap_end - gap_start + 1) as f32;
                        for (k, tt) in (gap_start..gap_end).enumerate() {
                            let w = (k + 1) as f32 / span;
                            self.values[tt * n + node] = b + (a - b) * w;
                        }
                    }
                    (Some(b), None) => {
                        for tt in gap_start..gap_end {
                            self.values[tt * n + node] = b;
                        }
                    }
                    (None, Some(a)) => {
                        for tt in gap_start..gap_end {
                            self.values[tt * n + node] = a;
                        }
                    }
                    (None, None) => {
                        return Err(Error::Data(format!(
                            "node {node} has no finite values to interpolate from"
                        )))
                    }
                }
                t = gap_end;
            }
        }
        Ok(())
    }
}

/// Z-score normalizer fit on the training flow channel only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit(values: &[f32]) -> Result<Normalizer> {
        assert!(!values.is_empty());
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std <= 0.0 {
            return Err(Error::Data(format!(
                "training flow is constant ({mean}); z-score is undefined"
            )));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Dataset calendar anchors for the bundled PEMS archives
/// (id, year, month, 1st-of-month weekday with 0 = Monday).
fn dataset_start_dow(id: &str) -> usize {
    match id {
        "pems03" => weekday(2018, 9, 1),
        "pems04" => weekday(2018, 1, 1),
        "pems07" => weekday(2017, 5, 1),
        "pems08" => weekday(2016, 7, 1),
        _ => 0,
    }
}

/// Day of week (0 = Monday) from a civil date.
pub fn weekday(year: i64, month: u32, day: u32) -> usize {
    // days since 1970-01-01, which was a Thursday
    let y = if month <= 2 { year - 1 } else { year };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = (y - era * 400) as u64;
    let m = month as u64;
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + day as u64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146_097 + doe as i64 - 719_468;
    (days.rem_euclid(7) as usize + 3) % 7
}

/// Load a dataset by id (with metadata verification) or by file path.
pub fn load_dataset(id_or_path: &str, root: &Path) -> Result<RawSeries> {
    let id = id_or_path.to_ascii_lowercase();
    if let Some((exp_nodes, exp_steps)) = ModelConfig::dataset_metadata(&id) {
        let mut series = None;
        for ext in ["npy", "csv"] {
            let p = root.join(format!("{id}.{ext}"));
            if p.exists() {
                series = Some(load_series_file(&p)?);
                break;
            }
        }
        let mut series = series.ok_or_else(|| {
            Error::MissingFile(root.join(format!("{id}.npy")))
        })?;
        if series.num_nodes != exp_nodes || series.t_total != exp_steps {
            return Err(Error::Data(format!(
                "{id}: expected [{exp_steps} x {exp_nodes}], got [{} x {}]",
                series.t_total, series.num_nodes
            )));
        }
        series.start_dow = dataset_start_dow(&id);
        series.interpolate_missing()?;
        Ok(series)
    } else {
        let p = PathBuf::from(id_or_path);
        let p = if p.is_absolute() || p.exists() {
            p
        } else {
            root.join(id_or_path)
        };
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        let mut series = load_series_file(&p)?;
        series.interpolate_missing()?;
        Ok(series)
    }
}

/// Load `.npy` (`[T,N]` or `[T,N,C]`, channel 0 = flow) or headerless CSV.
pub fn load_series_file(path: &Path) -> Result<RawSeries> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "npy" => {
            let arr = npy::read(path)?;
            let (t, n, c) = match arr.shape.len() {
                2 => (arr.shape[0], arr.shape[1], 1),
                3 => (arr.shape[0], arr.shape[1], arr.shape[2]),
                d => {
                    return Err(Error::Data(format!(
                        "{}: expected rank 2 or 3, got rank {d}",
                        path.display()
                    )))
                }
            };
            let mut values = vec![0f32; t * n];
            for ti in 0..t {
                for ni in 0..n {
                    values[ti * n + ni] = arr.data[(ti * n + ni) * c] as f32;
                }
            }
            Ok(RawSeries {
                values,
                t_total: t,
                num_nodes: n,
                start_dow: 0,
                start_tod_slot: 0,
                interval_min: 5,
            })
        }
        "csv" => {
            let text = std::fs::read_to_string(path)?;
            let mut values = Vec::new();
            let mut n = 0usize;
            let mut t = 0usize;
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row: Vec<f32> = line
                    .split(',')
                    .map(|v| {
                        let v = v.trim();
                        if v.is_empty() {
                            Ok(f32::NAN)
                        } else {
                            v.parse::<f32>().map_err(|_| Error::Parse {
                                context: path.display().to_string(),
                                message: format!("line {}: bad number `{v}`", lineno + 1),
                            })
                        }
                    })
                    .collect::<Result<_>>()?;
                if n == 0 {
                    n = row.len();
                } else if row.len() != n {
                    return Err(Error::Data(format!(
                        "{}: ragged CSV (line {} has {} cols, expected {n})",
                        path.display(),
                        lineno + 1,
                        row.len()
                    )));
                }
                values.extend_from_slice(&row);
                t += 1;
            }
            if t == 0 {
                return Err(Error::Data(format!("{}: empty CSV", path.display())));
            }
            Ok(RawSeries {
                values,
                t_total: t,
                num_nodes: n,
                start_dow: 0,
                start_tod_slot: 0,
                interval_min: 5,
            })
        }
        _ => Err(Error::Data(format!(
            "{}: unsupported extension (want .npy or .csv)",
            path.display()
        ))),
    }
}

/// Window start indices of a `[start, end)` span, stride 1, window `len`.
pub fn window_starts(span_start: usize, span_end: usize, len: usize) -> Vec<usize> {
    if span_end < span_start + len {
        return Vec::new();
    }
    (span_start..=span_end - len).collect()
}

/// Chronological 6:2:2 split with windows fully inside each split and a
/// normalizer fit on the training steps only.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub series: RawSeries,
    pub normalizer: Normalizer,
    pub t_in: usize,
    pub t_out: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Which split of the data to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}`"))),
        }
    }
}

pub fn split_and_window(series: RawSeries, cfg: &ModelConfig) -> Result<PreparedData> {
    let window = cfg.horizon_in + cfg.horizon_out;
    let t_total = series.t_total;
    if t_total < window {
        return Err(Error::Data(format!(
            "series has {t_total} steps, shorter than one window ({window})"
        )));
    }
    let n_train = t_total * 6 / 10;
    let n_val = t_total * 2 / 10;
    let train_span = (0, n_train);
    let val_span = (n_train, n_train + n_val);
    let test_span = (n_train + n_val, t_total);

    let train = window_starts(train_span.0, train_span.1, window);
    let val = window_starts(val_span.0, val_span.1, window);
    let test = window_starts(test_span.0, test_span.1, window);
    for (name, ws, span) in [
        ("train", &train, train_span),
        ("val", &val, val_span),
        ("test", &test, test_span),
    ] {
        if ws.is_empty() {
            return Err(Error::Data(format!(
                "{name} split [{}, {}) is too short for a {window}-step window",
                span.0, span.1
            )));
        }
    }

    let normalizer = Normalizer::fit(&series.values[..n_train * series.num_nodes])?;
    Ok(PreparedData {
        series,
        normalizer,
        t_in: cfg.horizon_in,
        t_out: cfg.horizon_out,
        train,
        val,
        test,
    })
}

/// Prepare the dataset named by the config: a PEMS id, `synthetic`, or a
/// file path. `root` is the data directory (`METADG_DATA_ROOT` or CLI).
pub fn prepare(cfg: &ModelConfig, root: &Path) -> Result<PreparedData> {
    let series = if cfg.dataset == "synthetic" {
        make_synthetic(cfg.num_nodes, cfg.synthetic_steps, cfg.seed)
    } else {
        load_dataset(&cfg.dataset, root)?
    };
    if series.num_nodes != cfg.num_nodes {
        return Err(Error::NodeCountMismatch {
            config: cfg.num_nodes,
            dataset: series.num_nodes,
        });
    }
    split_and_window(series, cfg)
}

/// Per-step time indices of every window in a batch.
#[derive(Debug, Clone)]
pub struct StepTime {
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
}

/// A batch of input/target windows plus per-step time features.
///
/// `x` is `[B, T, N, 3]` (normalized flow, tod/288, dow/7); `y_raw` is
/// `[B, T', N]` in raw units.
#[derive(Debug, Clone)]
pub struct WindowBatch<E: Element> {
    pub x: Array<E>,
    pub y_raw: Array<E>,
    pub enc_time: Vec<StepTime>,
    pub dec_time: Vec<StepTime>,
    pub starts: Vec<usize>,
}

impl PreparedData {
    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Materialize the windows starting at `starts` into one batch.
    pub fn batch<E: Element>(&self, starts: &[usize]) -> WindowBatch<E> {
        let (t_in, t_out) = (self.t_in, self.t_out);
        let n = self.series.num_nodes;
        let b = starts.len();
        let mut x = Array::<E>::zeros(&[b, t_in, n, 3]);
        let mut y = Array::<E>::zeros(&[b, t_out, n]);
        let xd = x.data_mut();
        for (bi, &s) in starts.iter().enumerate() {
            for t in 0..t_in {
                let tf = self.series.time_features(s + t);
                let tod_frac = tf.tod_index as f64 / SLOTS_PER_DAY as f64;
                let dow_frac = tf.dow_index as f64 / 7.0;
                for i in 0..n {
                    let off = ((bi * t_in + t) * n + i) * 3;
                    let raw = self.series.value(s + t, i) as f64;
                    xd[off] = E::from_f64(self.normalizer.forward(raw));
                    xd[off + 1] = E::from_f64(tod_frac);
                    xd[off + 2] = E::from_f64(dow_frac);
                }
            }
        }
        let yd = y.data_mut();
        for (bi, &s) in starts.iter().enumerate() {
            for t in 0..t_out {
                for i in 0..n {
                    yd[(bi * t_out + t) * n + i] =
                        E::from_f64(self.series.value(s + t_in + t, i) as f64);
                }
            }
        }
        let step_time = |offset: usize| -> Vec<StepTime> {
            (0..if offset == 0 { t_in } else { t_out })
                .map(|t| {
                    let global_t = if offset == 0 { t } else { t_in + t };
                    let mut tod = Vec::with_capacity(b);
                    let mut dow = Vec::with_capacity(b);
                    for &s in starts {
                        let tf = self.series.time_features(s + global_t);
                        tod.push(tf.tod_index);
                        dow.push(tf.dow_index);
                    }
                    StepTime { tod, dow }
                })
                .collect()
        };
        WindowBatch {
            x,
            y_raw: y,
            enc_time: step_time(0),
            dec_time: step_time(1),
            starts: starts.to_vec(),
        }
    }

    /// Batch index lists for a split in a fixed order.
    pub fn batched_indices(&self, which: Split, batch_size: usize) -> Vec<Vec<usize>> {
        self.split(which)
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Single-window batch for inference on an unlabeled series: the window is
/// the final `t_in` steps starting no later than `start + t_in`, targets
/// are zeros, decoder time features extend past the end of the series.
pub fn inference_batch<E: Element>(
    series: &RawSeries,
    normalizer: &Normalizer,
    t_in: usize,
    t_out: usize,
    start: usize,
) -> Result<WindowBatch<E>> {
    if series.t_total < t_in {
        return Err(Error::Data(format!(
            "window has {} steps, model expects at least {t_in}",
            series.t_total
        )));
    }
    let n = series.num_nodes;
    let first = series.t_total - t_in; // use the trailing t_in steps
    // calendar features are anchored at `start`, the window's global offset
    let features_at = |t: usize| {
        let abs = start + first + t + series.start_tod_slot;
        StepTime {
            tod: vec![abs % SLOTS_PER_DAY],
            dow: vec![(series.start_dow + abs / SLOTS_PER_DAY) % 7],
        }
    };
    let mut x = Array::<E>::zeros(&[1, t_in, n, 3]);
    let xd = x.data_mut();
    let mut enc_time = Vec::with_capacity(t_in);
    for t in 0..t_in {
        let st = features_at(t);
        let tod_frac = st.tod[0] as f64 / SLOTS_PER_DAY as f64;
        let dow_frac = st.dow[0] as f64 / 7.0;
        for i in 0..n {
            let off = (t * n + i) * 3;
            let raw = series.value(first + t, i) as f64;
            xd[off] = E::from_f64(normalizer.forward(raw));
            xd[off + 1] = E::from_f64(tod_frac);
            xd[off + 2] = E::from_f64(dow_frac);
        }
        enc_time.push(st);
    }
    let dec_time: Vec<StepTime> = (0..t_out).map(|t| features_at(t_in + t)).collect();
    Ok(WindowBatch {
        x,
        y_raw: Array::zeros(&[1, t_out, n]),
        enc_time,
        dec_time,
        starts: vec![start + first],
    })
}
