//! Configuration schema, presets, and run manifests.
//!
//! Configs are flat `key = value` text files so experiment diffs stay
//! readable. Per-dataset presets fill the embedding dimensions and batch
//! size; explicit file keys and `--set` overrides win over presets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Activation used for the candidate state of the recurrent cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateActivation {
    Tanh,
    Sigmoid,
}

impl CandidateActivation {
    fn as_str(self) -> &'static str {
        match self {
            CandidateActivation::Tanh => "tanh",
            CandidateActivation::Sigmoid => "sigmoid",
        }
    }
}

/// Every dimension, switch and tolerance of a run; the single source of
/// truth for ablations and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Dataset id (`pems03`..`pems08`, `synthetic`) or a path to a
    /// `.npy`/`.csv` file.
    pub dataset: String,
    pub num_nodes: usize,
    /// Input window length T.
    pub horizon_in: usize,
    /// Prediction window length T'.
    pub horizon_out: usize,
    /// Node embedding dimension d_s.
    pub d_s: usize,
    /// Time-of-day embedding dimension.
    pub d_tod: usize,
    /// Day-of-week embedding dimension.
    pub d_dow: usize,
    /// Number of learnable continuous-time frequencies.
    pub d_c: usize,
    /// Hidden state dimension d_H.
    pub d_hidden: usize,
    /// Attention dimension d' for Q/K/V.
    pub d_attn: usize,
    /// Exponent scale delta for the edge-weight adjustment.
    pub delta_scale: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub use_sce: bool,
    pub use_tce: bool,
    pub use_dgq: bool,
    /// Smooth-before-fuse ordering (the TSCE variant).
    pub tsce_order: bool,
    /// One shared enhanced embedding for all three consumers.
    pub joined_embedding: bool,
    pub candidate_activation: CandidateActivation,
    pub seed: u64,
    /// Variational dropout rate inside the attention MLPs.
    pub dropout: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub huber_kappa: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Ground-truth entries below this are excluded from MAPE.
    pub mape_threshold: f64,
    /// Feed ground truth instead of predictions to the decoder (train only).
    pub teacher_forcing: bool,
    /// Use only the propagated support in graph convolutions.
    pub single_support: bool,
    /// 0 = adaptive (beta) scaling of weakened edges; > 0 = multiply
    /// weakened edges by this fixed factor instead.
    pub dgq_weaken_factor: f64,
    /// Length of the generated series when `dataset = synthetic`.
    pub synthetic_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dataset: "synthetic".into(),
            num_nodes: 0,
            horizon_in: 12,
            horizon_out: 12,
            d_s: 12,
            d_tod: 8,
            d_dow: 8,
            d_c: 8,
            d_hidden: 64,
            d_attn: 64,
            delta_scale: 2.0,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            use_sce: true,
            use_tce: true,
            use_dgq: true,
            tsce_order: false,
            joined_embedding: false,
            candidate_activation: CandidateActivation::Tanh,
            seed: 1,
            dropout: 0.1,
            lr: 1e-3,
            grad_clip: 5.0,
            huber_kappa: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mape_threshold: 1.0,
            teacher_forcing: false,
            single_support: false,
            dgq_weaken_factor: 0.0,
            synthetic_steps: 2016,
        }
    }
}

/// (id, nodes, steps, d_s, d_tod, d_dow, d_c, batch)
type Preset = (&'static str, usize, usize, usize, usize, usize, usize, usize);
const PRESETS: &[Preset] = &[
    ("pems03", 358, 26_185, 12, 8, 8, 8, 16),
    ("pems04", 307, 16_992, 16, 12, 4, 6, 16),
    ("pems07", 883, 28_224, 16, 8, 8, 8, 8),
    ("pems08", 170, 17_856, 12, 10, 2, 8, 16),
];

impl ModelConfig {
    /// Combined time embedding dimension d_t.
    pub fn d_t(&self) -> usize {
        self.d_tod + self.d_dow
    }

    /// Preset for a known dataset id, if any.
    pub fn preset(id: &str) -> Option<ModelConfig> {
        let id = id.to_ascii_lowercase();
        PRESETS
            .iter()
            .find(|p| p.0 == id)
            .map(|&(name, nodes, _steps, d_s, d_tod, d_dow, d_c, batch)| ModelConfig {
                dataset: name.into(),
                num_nodes: nodes,
                d_s,
                d_tod,
                d_dow,
                d_c,
                batch_size: batch,
                ..ModelConfig::default()
            })
    }

    /// Expected (nodes, steps) for a known dataset id.
    pub fn dataset_metadata(id: &str) -> Option<(usize, usize)> {
        let id = id.to_ascii_lowercase();
        PRESETS.iter().find(|p| p.0 == id).map(|p| (p.1, p.2))
    }

    /// Parse a config file and apply `key=value` overrides on top.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<ModelConfig> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        ModelConfig::load_from_text(&text, overrides)
    }

    /// Same as [`ModelConfig::load`] but from in-memory text.
    pub fn load_from_text(text: &str, overrides: &[(String, String)]) -> Result<ModelConfig> {
        let mut entries = Vec::new();
        let mut issues = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => entries.push((k.trim().to_string(), v.trim().to_string())),
                None => issues.push(format!("line {}: expected `key = value`", lineno + 1)),
            }
        }

        // the dataset id decides which preset seeds the defaults
        let dataset = entries
            .iter()
            .chain(overrides.iter())
            .rev()
            .find(|(k, _)| k == "dataset")
            .map(|(_, v)| v.clone());
        let mut cfg = dataset
            .as_deref()
            .and_then(ModelConfig::preset)
            .unwrap_or_default();
        if let Some(d) = dataset {
            cfg.dataset = d;
        }

        for (k, v) in entries.iter().chain(overrides.iter()) {
            if let Err(e) = cfg.apply_kv(k, v) {
                issues.push(e.to_string());
            }
        }
        issues.extend(cfg.validation_issues());
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Set one configuration key from its textual value.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn count(key: &str, v: &str) -> Result<usize> {
            v.parse::<usize>().map_err(|_| Error::Config(vec![format!(
                "{key}: invalid count `{v}`"
            )]))
        }
        fn real(key: &str, v: &str) -> Result<f64> {
            v.parse::<f64>().map_err(|_| Error::Config(vec![format!(
                "{key}: invalid number `{v}`"
            )]))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(vec![format!("{key}: invalid flag `{v}`")])),
            }
        }
        match key {
            "dataset" => self.dataset = value.to_string(),
            "num_nodes" => self.num_nodes = count(key, value)?,
            "horizon_in" => self.horizon_in = count(key, value)?,
            "horizon_out" => self.horizon_out = count(key, value)?,
            "d_s" => self.d_s = count(key, value)?,
            "d_tod" => self.d_tod = count(key, value)?,
            "d_dow" => self.d_dow = count(key, value)?,
            "d_c" => self.d_c = count(key, value)?,
            "d_hidden" => self.d_hidden = count(key, value)?,
            "d_attn" => self.d_attn = count(key, value)?,
            "delta_scale" => self.delta_scale = real(key, value)?,
            "batch_size" => self.batch_size = count(key, value)?,
            "max_epochs" => self.max_epochs = count(key, value)?,
            "patience" => self.patience = count(key, value)?,
            "use_sce" => self.use_sce = flag(key, value)?,
            "use_tce" => self.use_tce = flag(key, value)?,
            "use_dgq" => self.use_dgq = flag(key, value)?,
            "tsce_order" => self.tsce_order = flag(key, value)?,
            "joined_embedding" => self.joined_embedding = flag(key, value)?,
            "candidate_activation" => {
                self.candidate_activation = match value {
                    "tanh" => CandidateActivation::Tanh,
                    "sigmoid" => CandidateActivation::Sigmoid,
                    _ => {
                        return Err(Error::Config(vec![format!(
                            "candidate_activation: expected tanh|sigmoid, got `{value}`"
                        )]))
                    }
                }
            }
            "seed" => {
                self.seed = value.parse::<u64>().map_err(|_| {
                    Error::Config(vec![format!("seed: invalid integer `{value}`")])
                })?
            }
            "dropout" => self.dropout = real(key, value)?,
            "lr" => self.lr = real(key, value)?,
            "grad_clip" => self.grad_clip = real(key, value)?,
            "huber_kappa" => self.huber_kappa = real(key, value)?,
            "adam_beta1" => self.adam_beta1 = real(key, value)?,
            "adam_beta2" => self.adam_beta2 = real(key, value)?,
            "adam_eps" => self.adam_eps = real(key, value)?,
            "mape_threshold" => self.mape_threshold = real(key, value)?,
            "teacher_forcing" => self.teacher_forcing = flag(key, value)?,
            "single_support" => self.single_support = flag(key, value)?,
            "dgq_weaken_factor" => self.dgq_weaken_factor = real(key, value)?,
            "synthetic_steps" => self.synthetic_steps = count(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn validation_issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let dims = [
            ("num_nodes", self.num_nodes),
            ("horizon_in", self.horizon_in),
            ("horizon_out", self.horizon_out),
            ("d_s", self.d_s),
            ("d_tod", self.d_tod),
            ("d_dow", self.d_dow),
            ("d_c", self.d_c),
            ("d_hidden", self.d_hidden),
            ("d_attn", self.d_attn),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in dims {
            if v == 0 {
                issues.push(format!("{name} must be >= 1"));
            }
        }
        if self.patience > self.max_epochs {
            issues.push(format!(
                "patience ({}) must not exceed max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if self.dropout.is_nan() || self.dropout < 0.0 || self.dropout >= 1.0 {
            issues.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            issues.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.huber_kappa.is_nan() || self.huber_kappa <= 0.0 {
            issues.push(format!("huber_kappa must be positive, got {}", self.huber_kappa));
        }
        if !self.delta_scale.is_finite() {
            issues.push(format!("delta_scale must be finite, got {}", self.delta_scale));
        }
        if self.dgq_weaken_factor.is_nan() || self.dgq_weaken_factor < 0.0 {
            issues.push(format!(
                "dgq_weaken_factor must be >= 0 (0 = adaptive), got {}",
                self.dgq_weaken_factor
            ));
        }
        issues
    }

    /// Validate the config, aggregating all problems.
    pub fn validate(&self) -> Result<()> {
        let issues = self.validation_issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Canonical textual form; keys in fixed order, values round-trippable.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "num_nodes = {}", self.num_nodes);
        let _ = writeln!(s, "horizon_in = {}", self.horizon_in);
        let _ = writeln!(s, "horizon_out = {}", self.horizon_out);
        let _ = writeln!(s, "d_s = {}", self.d_s);
        let _ = writeln!(s, "d_tod = {}", self.d_tod);
        let _ = writeln!(s, "d_dow = {}", self.d_dow);
        let _ = writeln!(s, "d_c = {}", self.d_c);
        let _ = writeln!(s, "d_hidden = {}", self.d_hidden);
        let _ = writeln!(s, "d_attn = {}", self.d_attn);
        let _ = writeln!(s, "delta_scale = {}", self.delta_scale);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "use_sce = {}", self.use_sce);
        let _ = writeln!(s, "use_tce = {}", self.use_tce);
        let _ = writeln!(s, "use_dgq = {}", self.use_dgq);
        let _ = writeln!(s, "tsce_order = {}", self.tsce_order);
        let _ = writeln!(s, "joined_embedding = {}", self.joined_embedding);
        let _ = writeln!(s, "candidate_activation = {}", self.candidate_activation.as_str());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "huber_kappa = {}", self.huber_kappa);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "mape_threshold = {}", self.mape_threshold);
        let _ = writeln!(s, "teacher_forcing = {}", self.teacher_forcing);
        let _ = writeln!(s, "single_support = {}", self.single_support);
        let _ = writeln!(s, "dgq_weaken_factor = {}", self.dgq_weaken_factor);
        let _ = writeln!(s, "synthetic_steps = {}", self.synthetic_steps);
        s
    }

    /// FNV-1a hash of the canonical text, as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// One epoch's losses, as recorded in `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Reproducibility record for a training run.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset: String,
    pub revision: String,
    pub epochs: Vec<EpochRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_loss: f64,
}

impl RunManifest {
    pub fn new(cfg: &ModelConfig) -> Self {
        RunManifest {
            config_hash: cfg.hash(),
            dataset: cfg.dataset.clone(),
            revision: source_revision(),
            epochs: Vec::new(),
            best_checkpoint: None,
            best_val_loss: f64::INFINITY,
        }
    }

    /// Write `run.txt` and `metrics.csv` under `dir`. Both are written to a
    /// temp file first and renamed, so readers never observe a torn update.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut run = String::new();
        let _ = writeln!(run, "config_hash = {}", self.config_hash);
        let _ = writeln!(run, "dataset = {}", self.dataset);
        let _ = writeln!(run, "revision = {}", self.revision);
        let _ = writeln!(run, "epochs = {}", self.epochs.len());
        let _ = writeln!(run, "best_val_loss = {}", self.best_val_loss);
        let _ = writeln!(
            run,
            "best_checkpoint = {}",
            self.best_checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        atomic_write(&dir.join("run.txt"), run.as_bytes())?;

        let mut csv = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(csv, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
        }
        atomic_write(&dir.join("metrics.csv"), csv.as_bytes())
    }
}

/// Write-then-rename so concurrent readers see either the old or the new file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn source_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
