//! Binary serialization.
//!
//! Checkpoint layout: magic `SGCK`, u32 LE header length, JSON header (model
//! config, training metadata, parameter names + shapes, dtype, RNG seed),
//! then each parameter's row-major f64 little-endian payload in header order.
//!
//! Matrix export layout: magic `SGMX`, dtype tag `f64 `, u64 LE rows, u64 LE
//! cols, row-major f64 little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::numcore::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
const MATRIX_MAGIC: &[u8; 4] = b"SGMX";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub epoch: usize,
    pub validation_loss: f64,
    pub dtype: String,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, Tensor>,
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let mut header = cp.header.clone();
    header.dtype = "f64le".into();
    header.tensors = cp
        .params
        .iter()
        .map(|(name, t)| TensorMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header)
        .map_err(|e| CoreError::contract(format!("header serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &cp.params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let bad = |message: &str| CoreError::Format {
        line: 0,
        message: message.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(bad("truncated checkpoint header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| bad(&format!("bad checkpoint header: {e}")))?;
    if header.dtype != "f64le" {
        return Err(bad(&format!("unsupported dtype {:?}", header.dtype)));
    }
    let mut cursor = &bytes[8 + hlen..];
    let mut params = BTreeMap::new();
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        if cursor.len() < n * 8 {
            return Err(bad(&format!("truncated payload for {:?}", meta.name)));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            cursor.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.insert(meta.name.clone(), Tensor::new(meta.shape.clone(), data)?);
    }
    Ok(Checkpoint { header, params })
}

/// Write one matrix in the documented binary export format.
pub fn export_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(24 + t.len() * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(b"f64 ");
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn import_matrix(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |message: &str| CoreError::Format {
        line: 0,
        message: message.to_string(),
    };
    if bytes.len() < 24 || &bytes[..4] != MATRIX_MAGIC {
        return Err(bad("not a matrix export (bad magic)"));
    }
    if &bytes[4..8] != b"f64 " {
        return Err(bad("unsupported matrix dtype"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != 24 + rows * cols * 8 {
        return Err(bad("matrix payload length mismatch"));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::matrix(rows, cols, data)
}
