//! Dataset ingestion and emission.
//!
//! The native interchange form is a raw little-endian `f32` binary (row
//! major) next to a sidecar text header that records the shape and axis
//! roles. Tiny 2-D arrays can also travel as CSV.

use std::fs;
use std::path::Path;

use crate::tensor::{AxisRole, Dataset};
use crate::{Error, Result};

/// Parsed sidecar header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub shape: Vec<usize>,
    pub axis_roles: Vec<AxisRole>,
}

/// Reads a `key = value` sidecar header. Recognized keys: `shape`
/// (space-separated axis lengths) and `axis_roles` (space-separated
/// `variable`/`time`/`space` tags). `#` starts a comment.
pub fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path)?;
    let mut shape: Option<Vec<usize>> = None;
    let mut roles: Option<Vec<AxisRole>> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected `key = value`", path.display(), lineno + 1))
        })?;
        match key.trim() {
            "shape" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split_whitespace().map(str::parse).collect();
                shape = Some(parsed.map_err(|e| {
                    Error::Config(format!("{}: bad shape: {e}", path.display()))
                })?);
            }
            "axis_roles" => {
                let parsed: Result<Vec<AxisRole>> =
                    value.split_whitespace().map(str::parse).collect();
                roles = Some(parsed?);
            }
            other => {
                return Err(Error::Config(format!(
                    "{}: unknown header key `{other}`",
                    path.display()
                )))
            }
        }
    }
    let shape = shape
        .ok_or_else(|| Error::Config(format!("{}: missing `shape`", path.display())))?;
    let axis_roles = match roles {
        Some(r) => r,
        None => vec![AxisRole::Space; shape.len()],
    };
    if axis_roles.len() != shape.len() {
        return Err(Error::Config(format!(
            "{}: {} roles for {} axes",
            path.display(),
            axis_roles.len(),
            shape.len()
        )));
    }
    Ok(Header { shape, axis_roles })
}

pub fn write_header(path: &Path, shape: &[usize], roles: &[AxisRole]) -> Result<()> {
    let shape_s: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
    let roles_s: Vec<String> = roles.iter().map(|r| r.to_string()).collect();
    let text = format!(
        "shape = {}\naxis_roles = {}\n",
        shape_s.join(" "),
        roles_s.join(" ")
    );
    fs::write(path, text)?;
    Ok(())
}

/// Loads a raw little-endian `f32` binary described by `header`,
/// rejecting NaN and infinity.
pub fn read_raw_f32(data_path: &Path, header: &Header) -> Result<Dataset<f32>> {
    let bytes = fs::read(data_path)?;
    let expected: usize = header.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::TruncatedFile(format!(
            "{}: {} bytes, header shape needs {expected}",
            data_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let ds = Dataset::new(header.shape.clone(), header.axis_roles.clone(), values)?;
    ds.validate_finite()?;
    Ok(ds)
}

pub fn write_raw_f32(ds: &Dataset<f32>, data_path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(ds.len() * 4);
    for v in &ds.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(data_path, bytes)?;
    Ok(())
}

/// Convenience: reads `<path>` with its `<path>.meta` sidecar, or a
/// `.csv` file directly.
pub fn read_dataset(data_path: &Path) -> Result<Dataset<f32>> {
    if data_path.extension().is_some_and(|e| e == "csv") {
        return read_csv(data_path);
    }
    let header = read_header(&sidecar_path(data_path))?;
    read_raw_f32(data_path, &header)
}

/// Writes `<path>` plus its `<path>.meta` sidecar.
pub fn write_dataset(ds: &Dataset<f32>, data_path: &Path) -> Result<()> {
    write_raw_f32(ds, data_path)?;
    write_header(&sidecar_path(data_path), &ds.shape, &ds.axis_roles)
}

pub fn sidecar_path(data_path: &Path) -> std::path::PathBuf {
    let mut os = data_path.as_os_str().to_owned();
    os.push(".meta");
    os.into()
}

/// Reads a 2-D comma-separated array (rows x cols, `time` x `space`).
pub fn read_csv(path: &Path) -> Result<Dataset<f32>> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f32>, _> =
            line.split(',').map(|f| f.trim().parse::<f32>()).collect();
        let row = row.map_err(|e| {
            Error::Config(format!("{}:{}: bad number: {e}", path.display(), lineno + 1))
        })?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Config(format!(
                    "{}:{}: ragged row ({} fields, expected {c})",
                    path.display(),
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Config(format!("{}: empty CSV", path.display())))?;
    let ds = Dataset::new(
        vec![rows, cols],
        vec![AxisRole::Time, AxisRole::Space],
        values,
    )?;
    ds.validate_finite()?;
    Ok(ds)
}

pub fn write_csv(ds: &Dataset<f32>, path: &Path) -> Result<()> {
    if ds.rank() != 2 {
        return Err(Error::Config(format!(
            "CSV output needs a rank-2 dataset, got rank {}",
            ds.rank()
        )));
    }
    let mut text = String::new();
    for row in ds.values.chunks(ds.shape[1]) {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
