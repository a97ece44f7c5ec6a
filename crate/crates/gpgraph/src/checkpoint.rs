//! Checkpoint serialization: a single binary file of length-prefixed named
//! tensors plus a JSON sidecar with the training config and loss trace.
//!
//! Layout: magic `GPG1`, then a little-endian u32 tensor count, then per
//! tensor `u32 name_len, name bytes, u32 ndim, u32 dims…, f64 data…`.
//! Everything little-endian; writes are byte-deterministic.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Array;
use crate::training::TrainConfig;

const MAGIC: &[u8; 4] = b"GPG1";

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, params)?;
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_tensors(bytes.as_slice())
}

fn write_tensors<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    let named = params.named();
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(named.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in &named {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(name_bytes).map_err(io)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())
            .map_err(io)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

fn read_tensors<R: Read>(mut r: R) -> Result<ModelParams> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, not a checkpoint file",
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(io)?;
    let count = u32::from_le_bytes(u32buf);
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(io)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        r.read_exact(&mut u32buf).map_err(io)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u32buf).map_err(io)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut u64buf).map_err(io)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        tensors.push((name, Array::new(shape, data)?));
    }
    ModelParams::from_named(&tensors)
}

/// JSON sidecar stored next to the checkpoint.
#[derive(Serialize, Deserialize)]
pub struct Sidecar {
    pub config: TrainConfig,
    pub loss_trace: Vec<f64>,
}

pub fn save_sidecar(path: &Path, config: &TrainConfig, loss_trace: &[f64]) -> Result<()> {
    let sidecar = Sidecar {
        config: config.clone(),
        loss_trace: loss_trace.to_vec(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Checkpoint(format!("sidecar serialization failed: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("sidecar parse failed: {e}")))
}
