//! Binary field container plus a JSON sidecar, and crash-visible output writing.
//!
//! Layout: 8-byte magic, then little-endian u64 dim, points_per_axis, channels, f64
//! box_half_width, margin, then channel-major samples as interleaved (re, im) f64 pairs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, GridSpec, Support, C64};

const MAGIC: &[u8; 8] = b"HLFIELD1";
const HEADER_LEN: usize = 8 + 3 * 8 + 2 * 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub grid: GridSpec,
    pub channels: usize,
    pub support: Option<Support>,
    pub layout: String,
    pub bytes: usize,
}

pub fn encode_field(f: &GridFunction) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * f.values.len());
    out.extend_from_slice(MAGIC);
    for v in [f.spec.dim as u64, f.spec.points_per_axis as u64, f.channels as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&f.spec.box_half_width.to_le_bytes());
    out.extend_from_slice(&f.spec.margin.to_le_bytes());
    for v in &f.values {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    out
}

fn bad(msg: &str) -> Error {
    Error::InvalidParameter(format!("field container: {msg}"))
}

pub fn decode_field(bytes: &[u8]) -> Result<GridFunction> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let word = |k: usize| -> [u8; 8] { bytes[8 + 8 * k..16 + 8 * k].try_into().expect("slice of eight bytes") };
    let dim = u64::from_le_bytes(word(0)) as usize;
    let n = u64::from_le_bytes(word(1)) as usize;
    let channels = u64::from_le_bytes(word(2)) as usize;
    let w = f64::from_le_bytes(word(3));
    let margin = f64::from_le_bytes(word(4));
    let spec = GridSpec::new(dim, w, n, margin)?;
    let count = channels.checked_mul(spec.len()).ok_or_else(|| bad("size overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 16 * count {
        return Err(bad(&format!("expected {} sample bytes, found {}", 16 * count, body.len())));
    }
    let values = body
        .chunks_exact(16)
        .map(|c| C64::new(f64::from_le_bytes(c[..8].try_into().expect("8 bytes")), f64::from_le_bytes(c[8..].try_into().expect("8 bytes"))))
        .collect();
    GridFunction::from_values(spec, channels, values)
}

pub fn sidecar(f: &GridFunction) -> FieldSidecar {
    FieldSidecar {
        grid: f.spec,
        channels: f.channels,
        support: f.support,
        layout: "channel-major, interleaved re/im, little-endian f64".into(),
        bytes: HEADER_LEN + 16 * f.values.len(),
    }
}

/// Writes `<path>` and `<path>.json`.
pub fn write_field(path: &Path, f: &GridFunction) -> Result<()> {
    write_atomic(path, &encode_field(f))?;
    let meta = serde_json::to_string_pretty(&sidecar(f))? + "\n";
    write_atomic(&with_suffix(path, ".json"), meta.as_bytes())
}

pub fn read_field(path: &Path) -> Result<GridFunction> {
    let f = decode_field(&fs::read(path)?)?;
    let side = with_suffix(path, ".json");
    if side.exists() {
        let meta: FieldSidecar = serde_json::from_slice(&fs::read(side)?)?;
        return Ok(f.with_support(meta.support));
    }
    Ok(f)
}

pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes through `<path>.partial` and renames, so an interrupted run leaves only the partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = with_suffix(path, ".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sample, TestFamily};

    #[test]
    fn container_roundtrip_is_bitwise() {
        let spec = GridSpec::new(2, 2.0, 32, 0.1).unwrap();
        let f = sample(&TestFamily::new("oscillating_bump", &[("width", 0.3)]), &spec, 2).unwrap();
        let back = decode_field(&encode_field(&f)).unwrap();
        assert_eq!(back.values, f.values);
        assert_eq!(back.spec, f.spec);
        assert_eq!(back.channels, 2);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let spec = GridSpec::new(1, 2.0, 32, 0.1).unwrap();
        let f = GridFunction::zeros(spec, 1);
        let bytes = encode_field(&f);
        assert!(decode_field(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_field(b"notafieldatall__________________________________").is_err());
    }

    #[test]
    fn field_files_roundtrip_with_support() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::new(2, 2.0, 32, 0.1).unwrap();
        let f = sample(&TestFamily::new("gaussian_bump", &[("width", 0.2)]), &spec, 1).unwrap();
        let path = dir.path().join("g.field");
        write_field(&path, &f).unwrap();
        assert!(!with_suffix(&path, ".partial").exists());
        let back = read_field(&path).unwrap();
        assert_eq!(back, f);
    }
}
