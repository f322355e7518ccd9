//! Checkpoint container: a little-endian file with a JSON text header
//! (run metadata plus a tensor directory of name/shape/offset) followed by
//! raw f64 payloads. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TDETCKP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Run configuration in its flat text form.
    pub config_text: String,
    /// Epochs fully completed.
    pub epoch: usize,
    pub global_step: usize,
    /// Optimizer step counter (bias correction state).
    pub adamw_step: usize,
    /// Learning rate in effect (after any drop).
    pub lr_current: f64,
    /// Training RNG seed (hex) and stream position for exact resume.
    pub rng_seed_hex: String,
    pub rng_word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 units from the start of the payload.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: u32,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
    }
    let header = Header {
        format: 1,
        meta: meta.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, _, data) in tensors {
        for v in *data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub type LoadedTensors = Vec<(String, Vec<usize>, Vec<f64>)>;

pub fn load(path: &Path) -> Result<(CheckpointMeta, LoadedTensors)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.format != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            header.format
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let start = e.offset as usize * 8;
        let end = start + e.len as usize * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} overruns the payload",
                e.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expect: usize = e.shape.iter().product();
        if expect != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: shape {:?} vs {} values",
                e.name,
                e.shape,
                data.len()
            )));
        }
        tensors.push((e.name.clone(), e.shape.clone(), data));
    }
    Ok((header.meta, tensors))
}
