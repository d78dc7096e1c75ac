//! On-disk tensor dumps: a raw little-endian payload `<base>.bin` next to a
//! JSON sidecar `<base>.json` holding `{dtype, shape, byte_order}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_order: String,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * dtype.width());
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8], sidecar: &Sidecar) -> Result<Tensor> {
    if sidecar.byte_order != "LE" {
        return Err(DiffError::Format(format!("unsupported byte order {}", sidecar.byte_order)));
    }
    let n: usize = sidecar.shape.iter().product();
    let w = sidecar.dtype.width();
    if bytes.len() != n * w {
        return Err(DiffError::Format(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            n * w
        )));
    }
    let data = bytes
        .chunks_exact(w)
        .map(|c| match sidecar.dtype {
            DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    Tensor::from_vec(&sidecar.shape, data)
}

/// Writes `<base>.json` then `<base>.bin`.
pub fn save(base: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let sidecar = Sidecar {
        dtype,
        shape: t.shape().to_vec(),
        byte_order: "LE".into(),
    };
    let json = serde_json::to_string(&sidecar).map_err(|e| DiffError::Format(e.to_string()))?;
    fs::write(with_ext(base, "json"), json)?;
    fs::write(with_ext(base, "bin"), encode(t, dtype))?;
    Ok(())
}

pub fn load(base: &Path) -> Result<Tensor> {
    let json = fs::read_to_string(with_ext(base, "json"))?;
    let sidecar: Sidecar = serde_json::from_str(&json).map_err(|e| DiffError::Format(e.to_string()))?;
    let bytes = fs::read(with_ext(base, "bin"))?;
    decode(&bytes, &sidecar)
}
