use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use slip_core::linalg::Matrix;
use slip_core::ring::{dequantize, FixedVec, RingParams};

/// Bad invocation: exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Fails with a usage error unless every path names an existing file.
pub fn require_files<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Usage(format!("no such file: {}", p.display())).into());
        }
    }
    Ok(())
}

/// A JSON input: a flat array is one token, an array of arrays is one row
/// per token, and `{"tokens": ...}` wraps either.
pub fn read_input(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let v = match v {
        Value::Object(mut o) => o.remove("tokens").context("input object has no \"tokens\" field")?,
        v => v,
    };
    let rows: Vec<Vec<f64>> = match v {
        Value::Array(items) if items.iter().all(Value::is_number) => vec![serde_json::from_value(Value::Array(items))?],
        v => serde_json::from_value(v).context("input must be numbers or arrays of numbers")?,
    };
    if rows.is_empty() || rows[0].is_empty() {
        bail!("input has no tokens");
    }
    Ok(Matrix::from_rows(&rows)?)
}

/// Inference result as written by `infer` and `infer-local`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub tokens: usize,
    pub dim: usize,
    pub modulus: u64,
    pub scale: u64,
    pub residues: Vec<u64>,
    pub values: Vec<f64>,
}

impl OutputFile {
    pub fn new(out: &FixedVec, tokens: usize, ring: &RingParams) -> Result<Self> {
        Ok(OutputFile {
            tokens,
            dim: out.len() / tokens.max(1),
            modulus: ring.modulus(),
            scale: ring.scale(),
            residues: out.values.clone(),
            values: dequantize(out, ring)?,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes to `path`, or stdout when absent.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
