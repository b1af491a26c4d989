//! Command-line entry point: train, evaluate, predict, sweep over
//! hyperparameter grids, dump per-step dynamic graphs, and generate
//! synthetic datasets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metadg::checkpoint;
use metadg::config::{atomic_write, ModelConfig};
use metadg::data::{self, Split, SyntheticSpec};
use metadg::error::{Error, Result};
use metadg::model::{ForwardOpts, MetaDg};
use metadg::tensor::Graph;
use metadg::train;

/// Environment variable naming the dataset directory.
const DATA_ROOT_ENV: &str = "METADG_DATA_ROOT";

#[derive(Parser)]
#[command(name = "metadg", about = "Dynamic-graph traffic flow forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataRootArg {
    /// Dataset directory; defaults to $METADG_DATA_ROOT, then `.`
    #[arg(long)]
    data_root: Option<PathBuf>,
}

impl DataRootArg {
    fn resolve(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file
    Train {
        /// Config file (`key = value` lines)
        #[arg(long)]
        config: PathBuf,
        /// Override config keys, e.g. `--set lr=0.0005`
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run directory (default `runs/<dataset>-<confighash>`)
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataRootArg,
    },
    /// Evaluate a checkpoint on a dataset split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to score: train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the metric table here as CSV (also printed)
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataRootArg,
    },
    /// Predict one horizon from a window file (.npy or .csv, rows = time)
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Flow window; the trailing `horizon_in` steps are used
        #[arg(long)]
        window: PathBuf,
        /// Global step index of the window's first row (calendar alignment)
        #[arg(long, default_value_t = 0)]
        start_step: usize,
        /// Write predictions here as CSV (rows = step, cols = node)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every combination of a hyperparameter grid
    Sweep {
        /// Grid file: `key = v1,v2,v3` lines
        #[arg(long)]
        grid: PathBuf,
        /// Base config file
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory for `sweep.csv` (default `sweep_out`)
        #[arg(long, default_value = "sweep_out")]
        out: PathBuf,
        #[command(flatten)]
        data: DataRootArg,
    },
    /// Dump per-step dynamic graphs of one window as dense CSV matrices
    DumpGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the window inside the chosen split
        #[arg(long)]
        window_index: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also dump decoder steps
        #[arg(long)]
        decoder: bool,
        #[arg(long, default_value = "graph_dump")]
        out: PathBuf,
        #[command(flatten)]
        data: DataRootArg,
    },
    /// Generate a synthetic dataset as a `.npy` file
    GenData {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ring-coupling strength between neighbouring nodes
        #[arg(long, default_value_t = 0.3)]
        coupling: f64,
        /// Gaussian innovation amplitude
        #[arg(long, default_value_t = 3.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(vec![format!("--set expects KEY=VALUE, got `{kv}`")]))
        })
        .collect()
}

fn cmd_train(config: &Path, set: &[String], out: Option<PathBuf>, root: &Path) -> Result<()> {
    let overrides = parse_overrides(set)?;
    let cfg = ModelConfig::load(config, &overrides)?;
    let prep = data::prepare(&cfg, root)?;
    let out_dir = out.unwrap_or_else(|| train::default_out_dir(&cfg));
    println!(
        "training `{}` ({} nodes, {} train / {} val / {} test windows) -> {}",
        cfg.dataset,
        cfg.num_nodes,
        prep.train.len(),
        prep.val.len(),
        prep.test.len(),
        out_dir.display()
    );
    let mut report = |_m: &MetaDg<f32>, r: &metadg::config::EpochRecord| {
        println!(
            "epoch {:>3}  train_huber {:<12.6} val_mae {:<12.6}",
            r.epoch, r.train_loss, r.val_loss
        );
        false
    };
    let outcome = train::train_loop::<f32>(&cfg, &prep, Some(&out_dir), Some(&mut report))?;
    println!("best validation MAE: {:.6}", outcome.best_val);
    if let Some(table) = &outcome.test_metrics {
        for h in [3usize, 6, 12] {
            if h <= table.per_horizon.len() {
                let m = &table.per_horizon[h - 1];
                println!(
                    "test horizon {h:>2}: mae {:.4}  rmse {:.4}  mape {:.4}",
                    m.mae, m.rmse, m.mape
                );
            }
        }
        let m = &table.overall;
        println!(
            "test average   : mae {:.4}  rmse {:.4}  mape {:.4}",
            m.mae, m.rmse, m.mape
        );
    }
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, split: &str, out: Option<PathBuf>, root: &Path) -> Result<()> {
    let split: Split = split.parse()?;
    let (_model, table) = train::evaluate_checkpoint::<f32>(ckpt, root, split)?;
    let csv = table.to_csv();
    print!("{csv}");
    if let Some(path) = out {
        atomic_write(&path, csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_predict(ckpt: &Path, window: &Path, start_step: usize, out: Option<PathBuf>) -> Result<()> {
    let (model, normalizer) = checkpoint::load::<f32>(ckpt)?;
    let series = data::load_series_file(window)?;
    if series.num_nodes != model.cfg.num_nodes {
        return Err(Error::NodeCountMismatch {
            config: model.cfg.num_nodes,
            dataset: series.num_nodes,
        });
    }
    let batch = data::inference_batch::<f32>(
        &series,
        &normalizer,
        model.cfg.horizon_in,
        model.cfg.horizon_out,
        start_step,
    )?;
    let mut g = Graph::<f32>::new();
    let run = model.forward(
        &mut g,
        &batch,
        &normalizer,
        ForwardOpts {
            compute_loss: false,
            ..ForwardOpts::default()
        },
    )?;
    let n = model.cfg.num_nodes;
    let mut csv = String::new();
    for step in run.preds_raw.data().chunks_exact(n) {
        let row: Vec<String> = step.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    match out {
        Some(path) => atomic_write(&path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn parse_grid(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut grid = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, vs) = line.split_once('=').ok_or_else(|| Error::Parse {
            context: path.display().to_string(),
            message: format!("line {}: expected `key = v1,v2,...`", lineno + 1),
        })?;
        let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
        if values.is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(Error::Parse {
                context: path.display().to_string(),
                message: format!("line {}: empty value", lineno + 1),
            });
        }
        grid.push((k.trim().to_string(), values));
    }
    if grid.is_empty() {
        return Err(Error::Parse {
            context: path.display().to_string(),
            message: "grid file has no entries".into(),
        });
    }
    Ok(grid)
}

fn cmd_sweep(
    grid_path: &Path,
    config: &Path,
    set: &[String],
    out: &Path,
    root: &Path,
) -> Result<()> {
    let base_overrides = parse_overrides(set)?;
    let grid = parse_grid(grid_path)?;
    let keys: Vec<String> = grid.iter().map(|(k, _)| k.clone()).collect();

    // cartesian product in file order
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for (_, values) in &grid {
        let mut next = Vec::new();
        for combo in &combos {
            for v in values {
                let mut c = combo.clone();
                c.push(v.clone());
                next.push(c);
            }
        }
        combos = next;
    }

    std::fs::create_dir_all(out)?;
    let mut csv = format!("{},val_mae,mae,rmse,mape\n", keys.join(","));
    for combo in &combos {
        let mut overrides = base_overrides.clone();
        for (k, v) in keys.iter().zip(combo) {
            overrides.push((k.clone(), v.clone()));
        }
        let cfg = ModelConfig::load(config, &overrides)?;
        let prep = data::prepare(&cfg, root)?;
        let outcome = train::train_loop::<f32>(&cfg, &prep, None, None)?;
        let m = outcome
            .test_metrics
            .as_ref()
            .map(|t| t.overall)
            .unwrap_or(metadg::data::Metrics {
                mae: f64::NAN,
                rmse: f64::NAN,
                mape: f64::NAN,
            });
        println!(
            "sweep {:?} -> val {:.4} test mae {:.4}",
            combo, outcome.best_val, m.mae
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            combo.join(","),
            outcome.best_val,
            m.mae,
            m.rmse,
            m.mape
        );
    }
    atomic_write(&out.join("sweep.csv"), csv.as_bytes())?;
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

fn matrix_csv(flat: &[f32], n: usize) -> String {
    let mut s = String::new();
    for row in flat.chunks_exact(n) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

fn cmd_dump_graph(
    ckpt: &Path,
    window_index: usize,
    split: &str,
    decoder: bool,
    out: &Path,
    root: &Path,
) -> Result<()> {
    let split: Split = split.parse()?;
    let (model, normalizer) = checkpoint::load::<f32>(ckpt)?;
    let mut prep = data::prepare(&model.cfg, root)?;
    prep.normalizer = normalizer;
    let windows = prep.split(split);
    if window_index >= windows.len() {
        return Err(Error::Data(format!(
            "window index {window_index} out of range ({} windows in split)",
            windows.len()
        )));
    }
    let start = windows[window_index];
    let batch = prep.batch::<f32>(&[start]);
    let mut g = Graph::<f32>::new();
    let run = model.forward(
        &mut g,
        &batch,
        &prep.normalizer,
        ForwardOpts {
            compute_loss: false,
            trace: true,
            ..ForwardOpts::default()
        },
    )?;
    let trace = run.trace.expect("trace requested");
    std::fs::create_dir_all(out)?;
    let n = model.cfg.num_nodes;
    let mut written = 0usize;
    for step in &trace.steps {
        let is_dec = step.t > model.cfg.horizon_in;
        if is_dec && !decoder {
            continue;
        }
        let tag = if is_dec { "dec" } else { "enc" };
        let local = if is_dec {
            step.t - model.cfg.horizon_in
        } else {
            step.t
        };
        let base = format!("{tag}_step{local:02}");
        atomic_write(
            &out.join(format!("{base}.a_tilde.csv")),
            matrix_csv(step.a_tilde.data(), n).as_bytes(),
        )?;
        if let Some(p) = &step.qualification {
            atomic_write(
                &out.join(format!("{base}.qualification.csv")),
                matrix_csv(p.data(), n).as_bytes(),
            )?;
        }
        if let Some(phi) = &step.phi {
            atomic_write(
                &out.join(format!("{base}.phi.csv")),
                matrix_csv(phi.data(), n).as_bytes(),
            )?;
        }
        written += 1;
    }
    println!(
        "dumped {written} steps (window {window_index}, start {start}) to {}",
        out.display()
    );
    Ok(())
}

fn cmd_gen_data(
    nodes: usize,
    steps: usize,
    seed: u64,
    coupling: f64,
    noise: f64,
    out: &Path,
) -> Result<()> {
    if nodes == 0 {
        return Err(Error::Data("need at least one node".into()));
    }
    let mut spec = SyntheticSpec::new(nodes, steps, seed);
    spec.coupling = coupling;
    spec.noise_amp = noise;
    let series = spec.generate();
    let mut flat = vec![0f32; steps * nodes];
    for t in 0..steps {
        for i in 0..nodes {
            flat[t * nodes + i] = series.value(t, i);
        }
    }
    data::npy::write_f32(out, &[steps, nodes], &flat)?;
    println!("wrote [{steps} x {nodes}] synthetic series to {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, set, out, data } => {
            cmd_train(&config, &set, out, &data.resolve())
        }
        Command::Evaluate { checkpoint, split, out, data } => {
            cmd_evaluate(&checkpoint, &split, out, &data.resolve())
        }
        Command::Predict { checkpoint, window, start_step, out } => {
            cmd_predict(&checkpoint, &window, start_step, out)
        }
        Command::Sweep { grid, config, set, out, data } => {
            cmd_sweep(&grid, &config, &set, &out, &data.resolve())
        }
        Command::DumpGraph { checkpoint, window_index, split, decoder, out, data } => {
            cmd_dump_graph(&checkpoint, window_index, &split, decoder, &out, &data.resolve())
        }
        Command::GenData { nodes, steps, seed, coupling, noise, out } => {
            cmd_gen_data(nodes, steps, seed, coupling, noise, &out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
