//! Checkpoints: a directory with a text manifest (tensor names, shapes,
//! dtypes, offsets), one raw little-endian f32 blob file, the canonical
//! config, and the normalizer. Everything is legible from any language
//! with a file API.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{atomic_write, ModelConfig};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::{MetaDg, INIT_SCHEME};
use crate::tensor::{Array, Element};

const MANIFEST: &str = "manifest.txt";
const BLOBS: &str = "params.bin";
const CONFIG: &str = "config.txt";
const NORMALIZER: &str = "normalizer.txt";

/// Write a checkpoint directory. Existing files are replaced atomically.
pub fn save<E: Element>(dir: &Path, model: &MetaDg<E>, normalizer: &Normalizer) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg_text = model.cfg.to_text();

    let mut manifest = String::new();
    let _ = writeln!(manifest, "metadg-checkpoint v1");
    let _ = writeln!(manifest, "config_hash = {}", model.cfg.hash());
    let _ = writeln!(manifest, "init = {INIT_SCHEME} (seed = {})", model.cfg.seed);
    let mut blob: Vec<u8> = Vec::new();
    for p in model.params() {
        let offset = blob.len();
        for v in p.value.data() {
            blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        let shape = p
            .value
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let _ = writeln!(
            manifest,
            "tensor {} f32 {} {} {}",
            p.name,
            shape,
            offset,
            blob.len() - offset
        );
    }
    atomic_write(&dir.join(CONFIG), cfg_text.as_bytes())?;
    atomic_write(&dir.join(BLOBS), &blob)?;
    let norm_text = format!("mean = {}\nstd = {}\n", normalizer.mean, normalizer.std);
    atomic_write(&dir.join(NORMALIZER), norm_text.as_bytes())?;
    atomic_write(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Load a checkpoint directory back into a model and normalizer.
pub fn load<E: Element>(dir: &Path) -> Result<(MetaDg<E>, Normalizer)> {
    if !dir.join(MANIFEST).exists() {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (no {MANIFEST})",
            dir.display()
        )));
    }
    let cfg_text = fs::read_to_string(dir.join(CONFIG))?;
    let cfg = ModelConfig::load_from_text(&cfg_text, &[])?;

    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let blob = fs::read(dir.join(BLOBS))?;
    let mut declared_hash = None;
    let mut tensors: HashMap<String, Array<E>> = HashMap::new();
    for line in manifest.lines() {
        if let Some(rest) = line.strip_prefix("config_hash = ") {
            declared_hash = Some(rest.trim().to_string());
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(Error::Checkpoint(format!("bad tensor line `{line}`")));
            }
            let (name, dtype, shape_s, off_s, len_s) =
                (parts[0], parts[1], parts[2], parts[3], parts[4]);
            if dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: unsupported dtype {dtype}"
                )));
            }
            let shape: Vec<usize> = shape_s
                .split('x')
                .map(|d| {
                    d.parse::<usize>().map_err(|_| {
                        Error::Checkpoint(format!("tensor {name}: bad shape `{shape_s}`"))
                    })
                })
                .collect::<Result<_>>()?;
            let offset: usize = off_s
                .parse()
                .map_err(|_| Error::Checkpoint(format!("tensor {name}: bad offset")))?;
            let nbytes: usize = len_s
                .parse()
                .map_err(|_| Error::Checkpoint(format!("tensor {name}: bad length")))?;
            if offset + nbytes > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: blob range {offset}+{nbytes} exceeds file ({})",
                    blob.len()
                )));
            }
            let count: usize = shape.iter().product();
            if nbytes != count * 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: {nbytes} bytes for {count} f32 values"
                )));
            }
            let mut data = Vec::with_capacity(count);
            for c in blob[offset..offset + nbytes].chunks_exact(4) {
                data.push(E::from_f64(
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
                ));
            }
            tensors.insert(name.to_string(), Array::new(shape, data));
        }
    }
    match declared_hash {
        Some(h) if h == cfg.hash() => {}
        Some(h) => {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: manifest {h}, config {}",
                cfg.hash()
            )))
        }
        None => return Err(Error::Checkpoint("manifest missing config_hash".into())),
    }

    let norm_text = fs::read_to_string(dir.join(NORMALIZER))?;
    let mut mean = None;
    let mut std = None;
    for line in norm_text.lines() {
        if let Some(v) = line.strip_prefix("mean = ") {
            mean = v.trim().parse::<f64>().ok();
        } else if let Some(v) = line.strip_prefix("std = ") {
            std = v.trim().parse::<f64>().ok();
        }
    }
    let (mean, std) = match (mean, std) {
        (Some(m), Some(s)) => (m, s),
        _ => {
            return Err(Error::Checkpoint(format!(
                "malformed {NORMALIZER} in {}",
                dir.display()
            )))
        }
    };

    let model = MetaDg::from_params(cfg, tensors)?;
    Ok((model, Normalizer { mean, std }))
}
