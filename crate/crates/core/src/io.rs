//! Matrix and feature-map file formats.
//!
//! Matrices are stored either as CSV (one row per line, decimal floats) or as
//! raw binary: ASCII magic `OSCM`, little-endian `u32` rows and cols, then
//! `rows·cols` little-endian `f64` values in row-major order. Readers detect
//! the binary form by its magic.
//!
//! Feature maps (one calibration sample of a convolution input) use the same
//! layout with an extra depth header: magic `OSCT`, `u32` channels, `u32`
//! height, `u32` width, then channel-major `f64` values.

use std::fs;
use std::path::Path;

use crate::builders::FeatureMap;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"OSCM";
pub const TENSOR_MAGIC: &[u8; 4] = b"OSCT";

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MATRIX_MAGIC) {
        decode_binary_matrix(&bytes).map_err(|m| Error::format(path, m))
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8 CSV"))?;
        parse_csv_matrix(&text).map_err(|m| Error::format(path, m))
    }
}

pub fn write_matrix_binary(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_binary_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn encode_binary_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * m.rows() * m.cols());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.to_row_major() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_binary_matrix(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    if bytes.len() < 12 || &bytes[..4] != MATRIX_MAGIC {
        return Err("missing OSCM header".into());
    }
    let rows = read_u32(bytes, 4) as usize;
    let cols = read_u32(bytes, 8) as usize;
    let values = read_f64s(&bytes[12..], rows * cols)?;
    Matrix::from_row_major(rows, cols, &values).map_err(|e| e.to_string())
}

pub fn parse_csv_matrix(text: &str) -> std::result::Result<Matrix, String> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("line {}: cannot parse {:?}", lineno + 1, tok.trim()))
            })
            .collect::<std::result::Result<Vec<f64>, String>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows).map_err(|e| e.to_string())
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_map(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write_feature_map(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + 8 * map.data().len());
    out.extend_from_slice(TENSOR_MAGIC);
    for dim in [map.channels(), map.height(), map.width()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn decode_feature_map(bytes: &[u8]) -> std::result::Result<FeatureMap, String> {
    if bytes.len() < 16 || &bytes[..4] != TENSOR_MAGIC {
        return Err("missing OSCT header".into());
    }
    let c = read_u32(bytes, 4) as usize;
    let h = read_u32(bytes, 8) as usize;
    let w = read_u32(bytes, 12) as usize;
    let values = read_f64s(&bytes[16..], c * h * w)?;
    FeatureMap::new(c, h, w, values).map_err(|e| e.to_string())
}

/// Reads every feature-map file in `dir`, ordered by file name.
pub fn read_feature_map_dir(dir: impl AsRef<Path>) -> Result<Vec<FeatureMap>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(read_feature_map).collect()
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn read_f64s(body: &[u8], count: usize) -> std::result::Result<Vec<f64>, String> {
    if body.len() != count * 8 {
        return Err(format!("expected {} payload bytes, found {}", count * 8, body.len()));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
