//! Model checkpoints.
//!
//! Layout: the 8-byte magic `SDCKPT01`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then `param_count` little-endian `f64` parameters.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use semidiff_core::model::{Architecture, GrowthCaps, ModelFamily};
use semidiff_core::ScoreModel;

use crate::error::LabError;

pub const MAGIC: &[u8; 8] = b"SDCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub architecture: Architecture,
    pub family: ModelFamily,
    pub growth_caps: GrowthCaps,
    pub seed: u64,
    pub param_count: usize,
    pub fingerprint: String,
}

pub fn encode(model: &ScoreModel) -> Vec<u8> {
    let header = Header {
        architecture: model.architecture().clone(),
        family: model.family(),
        growth_caps: model.growth_caps(),
        seed: model.seed(),
        param_count: model.params().len(),
        fingerprint: model.fingerprint(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ScoreModel, LabError> {
    let bad = |m: &str| LabError::format(path, m);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| bad(&format!("header: {e}")))?;
    let raw = &body[len..];
    if raw.len() != 8 * header.param_count {
        return Err(bad(&format!("expected {} parameters, found {} bytes", header.param_count, raw.len())));
    }
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let model = ScoreModel::from_parts(header.architecture, header.family, header.growth_caps, header.seed, params)?;
    if model.fingerprint() != header.fingerprint {
        return Err(bad("fingerprint mismatch"));
    }
    Ok(model)
}

pub fn save(model: &ScoreModel, path: &Path) -> Result<(), LabError> {
    let mut f = std::fs::File::create(path).map_err(LabError::io(path))?;
    f.write_all(&encode(model)).map_err(LabError::io(path))
}

pub fn load(path: &Path) -> Result<ScoreModel, LabError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(LabError::io(path))?;
    decode(&bytes, path)
}
