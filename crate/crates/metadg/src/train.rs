//! Training loop: Huber loss on the raw scale, Adam with gradient-norm
//! clipping, early stopping on validation MAE, checkpointing of the best
//! model, and batched evaluation.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{EpochRecord, ModelConfig, RunManifest};
use crate::data::{masked_mae, MetricAccum, MetricsTable, PreparedData, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOpts, MetaDg};
use crate::rng::Rng;
use crate::tensor::{Element, Grads, Graph, Var};

/// Scalar Huber value for one error; the tape op must agree with this.
pub fn huber_scalar(error: f64, kappa: f64) -> f64 {
    let a = error.abs();
    if a <= kappa {
        0.5 * error * error
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

/// Adam with bias correction; moments held in f64 regardless of the
/// parameter element type.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<E: Element>(model: &MetaDg<E>, cfg: &ModelConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            clip: cfg.grad_clip,
            step: 0,
            m: model.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: model.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Apply one update. Returns the pre-clip global gradient norm. Missing
    /// gradients (parameters off the loss path) are treated as zero.
    pub fn apply<E: Element>(
        &mut self,
        model: &mut MetaDg<E>,
        grads: &Grads<E>,
        param_vars: &[Var],
    ) -> f64 {
        let mut sq_norm = 0.0;
        let g64: Vec<Option<Vec<f64>>> = param_vars
            .iter()
            .map(|&v| {
                grads.get(v).map(|g| {
                    let gv = g.to_f64_vec();
                    for x in &gv {
                        sq_norm += x * x;
                    }
                    gv
                })
            })
            .collect();
        let norm = sq_norm.sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, gopt) in g64.iter().enumerate() {
            let Some(gv) = gopt else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = model.param_mut(i);
            for (j, val) in value.data_mut().iter_mut().enumerate() {
                let g = gv[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let upd = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *val = E::from_f64(val.to_f64() - upd);
            }
        }
        norm
    }
}

/// Result of a training run: manifest plus the best model in memory.
pub struct TrainOutcome<E: Element> {
    pub manifest: RunManifest,
    pub model: MetaDg<E>,
    pub best_val: f64,
    /// Test metrics of the best checkpoint (when a test split evaluation ran).
    pub test_metrics: Option<MetricsTable>,
}

/// Early-out hook: called after each epoch with the live model; return
/// `true` to stop training (e.g. a desk-scale overfit target was reached).
pub type StopFn<'a, E> = &'a mut dyn FnMut(&MetaDg<E>, &EpochRecord) -> bool;

/// Run the full training loop.
///
/// Per epoch: shuffle training windows, optimize with Adam, score masked
/// MAE on the validation split, checkpoint on improvement, and stop after
/// `patience` stagnant epochs or `max_epochs`. When `out_dir` is given,
/// `run.txt`, `metrics.csv`, `results.csv` and `best/` are maintained
/// there; the final report evaluates the best checkpoint on the test split.
pub fn train_loop<E: Element>(
    cfg: &ModelConfig,
    prep: &PreparedData,
    out_dir: Option<&Path>,
    mut stop: Option<StopFn<'_, E>>,
) -> Result<TrainOutcome<E>> {
    if prep.train.is_empty() || prep.val.is_empty() {
        return Err(Error::Data("empty training or validation split".into()));
    }
    let root = Rng::new(cfg.seed);
    let model_rng = root.fork("model");
    let mut shuffle_rng = root.fork("shuffle");
    let mut dropout_rng = root.fork("dropout");

    let mut model = MetaDg::<E>::new(cfg.clone(), &model_rng)?;
    let mut opt = Adam::new(&model, cfg);
    let mut manifest = RunManifest::new(cfg);
    let mut best_params: Option<Vec<(String, crate::tensor::Array<E>)>> = None;
    let mut best_val = f64::INFINITY;
    let mut stagnant = 0usize;

    let best_dir = out_dir.map(|d| d.join("best"));

    for epoch in 1..=cfg.max_epochs {
        let mut order = prep.train.clone();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut window_count = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = prep.batch::<E>(chunk);
            let mut g = Graph::<E>::new();
            let run = model.forward(
                &mut g,
                &batch,
                &prep.normalizer,
                ForwardOpts {
                    training: true,
                    compute_loss: true,
                    rng: Some(&mut dropout_rng),
                    ..ForwardOpts::default()
                },
            )?;
            let loss = run.loss.expect("loss requested");
            let loss_val = g.value(loss).data()[0].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    tensor: g
                        .first_non_finite()
                        .unwrap_or_else(|| "loss".into()),
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = g.backward(loss);
            opt.apply(&mut model, &grads, &run.param_vars);
            loss_sum += loss_val * chunk.len() as f64;
            window_count += chunk.len();
        }
        let train_loss = loss_sum / window_count as f64;
        let val_loss = validation_mae(&model, prep, cfg)?;

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        manifest.epochs.push(record);

        if val_loss < best_val {
            best_val = val_loss;
            stagnant = 0;
            best_params = Some(
                model
                    .params()
                    .iter()
                    .map(|p| (p.name.clone(), p.value.clone()))
                    .collect(),
            );
            if let Some(dir) = &best_dir {
                checkpoint::save(dir, &model, &prep.normalizer)?;
                manifest.best_checkpoint = Some(dir.clone());
            }
            manifest.best_val_loss = best_val;
        } else {
            stagnant += 1;
        }
        if let Some(dir) = out_dir {
            manifest.write(dir)?;
        }
        let stop_requested = stop.as_mut().is_some_and(|f| f(&model, &record));
        if stop_requested || stagnant >= cfg.patience {
            break;
        }
    }

    // restore the best parameters
    if let Some(best) = best_params {
        let map = best.into_iter().collect();
        model = MetaDg::from_params(cfg.clone(), map)?;
    }

    let test_metrics = if prep.test.is_empty() {
        None
    } else {
        let table = evaluate(&model, prep, Split::Test)?;
        if let Some(dir) = out_dir {
            crate::config::atomic_write(&dir.join("results.csv"), table.to_csv().as_bytes())?;
        }
        Some(table)
    };

    Ok(TrainOutcome {
        manifest,
        model,
        best_val,
        test_metrics,
    })
}

/// Masked MAE (raw scale) over the validation split.
pub fn validation_mae<E: Element>(
    model: &MetaDg<E>,
    prep: &PreparedData,
    cfg: &ModelConfig,
) -> Result<f64> {
    let mut pred_all = Vec::new();
    let mut truth_all = Vec::new();
    for chunk in prep.val.chunks(cfg.batch_size) {
        let batch = prep.batch::<E>(chunk);
        let mut g = Graph::<E>::new();
        let run = model.forward(
            &mut g,
            &batch,
            &prep.normalizer,
            ForwardOpts {
                compute_loss: false,
                ..ForwardOpts::default()
            },
        )?;
        pred_all.extend(run.preds_raw.to_f64_vec());
        truth_all.extend(batch.y_raw.to_f64_vec());
    }
    Ok(masked_mae(&pred_all, &truth_all, cfg.mape_threshold))
}

/// Metric table of a model over one split, batched through the accumulator.
pub fn evaluate<E: Element>(
    model: &MetaDg<E>,
    prep: &PreparedData,
    split: Split,
) -> Result<MetricsTable> {
    let cfg = &model.cfg;
    let mut acc = MetricAccum::new(cfg.horizon_out, cfg.mape_threshold);
    for chunk in prep.split(split).chunks(cfg.batch_size) {
        let batch = prep.batch::<E>(chunk);
        let mut g = Graph::<E>::new();
        let run = model.forward(
            &mut g,
            &batch,
            &prep.normalizer,
            ForwardOpts {
                compute_loss: false,
                ..ForwardOpts::default()
            },
        )?;
        acc.add_block(
            &run.preds_raw.to_f64_vec(),
            &batch.y_raw.to_f64_vec(),
            cfg.num_nodes,
        );
    }
    Ok(MetricsTable {
        per_horizon: acc.per_horizon(),
        overall: acc.overall(),
    })
}

/// Load a checkpoint and evaluate one split of its dataset.
pub fn evaluate_checkpoint<E: Element>(
    dir: &Path,
    data_root: &Path,
    split: Split,
) -> Result<(MetaDg<E>, MetricsTable)> {
    let (model, normalizer) = checkpoint::load::<E>(dir)?;
    let mut prep = crate::data::prepare(&model.cfg, data_root)?;
    // evaluation must use the training-time statistics
    prep.normalizer = normalizer;
    let table = evaluate(&model, &prep, split)?;
    Ok((model, table))
}

/// Default run directory for a config: `runs/<dataset>-<hash8>`.
pub fn default_out_dir(cfg: &ModelConfig) -> PathBuf {
    PathBuf::from("runs").join(format!(
        "{}-{}",
        cfg.dataset,
        &cfg.hash()[..8]
    ))
}
