//! Minimal `.npy` (v1.0) reader/writer for dense float arrays.
//!
//! Supports C-order `<f4`/`<f8` payloads, which covers the PEMS archives
//! once exported to a plain array, and is what the synthetic generator
//! emits.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Parsed `.npy` payload: shape plus data widened to f64.
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn read(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::Parse {
        context: path.display().to_string(),
        message: msg.to_string(),
    };
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(fail("not a .npy file (bad magic)"));
    }
    let (major, _minor) = (bytes[6], bytes[7]);
    if major != 1 {
        return Err(fail(&format!("unsupported .npy version {major}")));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + hlen])
        .map_err(|_| fail("header is not ASCII"))?;

    let descr = extract_quoted(header, "descr").ok_or_else(|| fail("missing descr"))?;
    let width = match descr.as_str() {
        "<f4" | "f4" => 4,
        "<f8" | "f8" => 8,
        other => return Err(fail(&format!("unsupported dtype `{other}`"))),
    };
    if header.contains("'fortran_order': True") {
        return Err(fail("fortran_order arrays are not supported"));
    }
    let shape = extract_shape(header).ok_or_else(|| fail("missing shape"))?;

    let n: usize = shape.iter().product();
    let payload = &bytes[10 + hlen..];
    if payload.len() < n * width {
        return Err(fail(&format!(
            "payload too short: need {} bytes, have {}",
            n * width,
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(n);
    match width {
        4 => {
            for c in payload[..n * 4].chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        _ => {
            for c in payload[..n * 8].chunks_exact(8) {
                data.push(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]));
            }
        }
    }
    Ok(NpyArray { shape, data })
}

/// Write a C-order `<f4` array.
pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_str}, }}"
    );
    // pad so that data starts at a multiple of 64
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&[1u8, 0u8])?;
    f.write_all(&(header.len() as u16).to_le_bytes())?;
    f.write_all(header.as_bytes())?;
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn extract_quoted(header: &str, key: &str) -> Option<String> {
    let pat = format!("'{key}':");
    let at = header.find(&pat)? + pat.len();
    let rest = header[at..].trim_start();
    let rest = rest.strip_prefix('\'')?;
    let end = rest.find('\'')?;
    Some(rest[..end].to_string())
}

fn extract_shape(header: &str) -> Option<Vec<usize>> {
    let at = header.find("'shape':")? + "'shape':".len();
    let rest = header[at..].trim_start();
    let rest = rest.strip_prefix('(')?;
    let end = rest.find(')')?;
    let inner = &rest[..end];
    let mut shape = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        shape.push(part.parse::<usize>().ok()?);
    }
    Some(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32() {
        let dir = std::env::temp_dir().join("metadg_npy_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("rt.npy");
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        write_f32(&p, &[4, 6], &data).unwrap();
        let back = read(&p).unwrap();
        assert_eq!(back.shape, vec![4, 6]);
        for (a, b) in back.data.iter().zip(&data) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join("metadg_npy_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.npy");
        std::fs::write(&p, b"not an npy file at all").unwrap();
        assert!(read(&p).is_err());
    }
}
