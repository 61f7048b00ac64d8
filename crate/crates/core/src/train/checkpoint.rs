use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RVQACKP\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f32 payload.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// A loaded checkpoint: named parameters plus the run's config echo and seed.
#[derive(Debug)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: serde_json::Value,
    pub params: Parameters<f32>,
}

/// Container layout: 8-byte magic, u64 little-endian manifest length, the
/// JSON manifest, then one contiguous payload of little-endian f32 values.
/// Save/load round-trips are byte-exact.
pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    params: &Parameters<f32>,
    config: &C,
    seed: u64,
) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in params.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.numel(),
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.numel();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        config: serde_json::to_value(config)?,
        params: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(16 + manifest_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::Data("truncated checkpoint manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let payload = &bytes[16 + manifest_len..];
    let mut params = Parameters::new();
    for entry in &manifest.params {
        let expected: usize = entry.shape.iter().product();
        if expected != entry.len {
            return Err(Error::Data(format!(
                "parameter {}: shape {:?} does not match length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > payload.len() {
            return Err(Error::Data(format!(
                "parameter {} extends past the payload",
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        seed: manifest.seed,
        config: manifest.config,
        params,
    })
}
