//! Checkpoint file format.
//!
//! ```text
//! "DEVO" | u16 format version | u32 header len | header JSON
//!        | u64 param count | params as little-endian f64
//!        | 32-byte SHA-256 over everything above
//! ```
//!
//! The digest makes silent corruption of the parameter block detectable;
//! the JSON header keeps the metadata inspectable with standard tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, ModelCheckpoint, ModelError, TrainProvenance};
use crate::flow::LabelDict;
use crate::util;

const MAGIC: &[u8; 4] = b"DEVO";
const FORMAT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version_id: String,
    lineage_level: u32,
    parent_version: Option<String>,
    num_classes: usize,
    arch: Arch,
    label_dict: LabelDict,
    created_ts_us: i64,
    train_provenance: Option<TrainProvenance>,
}

pub fn checkpoint_bytes(model: &ModelCheckpoint) -> Result<Vec<u8>, ModelError> {
    model.validate()?;
    let header = Header {
        version_id: model.version_id.clone(),
        lineage_level: model.lineage_level,
        parent_version: model.parent_version.clone(),
        num_classes: model.num_classes,
        arch: model.arch,
        label_dict: model.label_dict.clone(),
        created_ts_us: model.created_ts_us,
        train_provenance: model.train_provenance.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(4 + 2 + 4 + header_json.len() + 8 + model.parameters.len() * 8 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(model.parameters.len() as u64).to_le_bytes());
    for p in &model.parameters {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = util::sha256_raw(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save_checkpoint(model: &ModelCheckpoint, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn checkpoint_from_bytes(data: &[u8]) -> Result<ModelCheckpoint, ModelError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *pos + n > data.len() {
            return Err(ModelError::Truncated);
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let header_bytes = take(&mut pos, header_len)?;
    let param_count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    if param_count > data.len() / 8 {
        return Err(ModelError::Truncated);
    }
    let param_bytes = take(&mut pos, param_count * 8)?;
    let stored_digest = take(&mut pos, 32)?;
    if pos != data.len() {
        // trailing bytes fall outside the digested region
        return Err(ModelError::DigestMismatch);
    }

    let computed = util::sha256_raw(&data[..pos - 32]);
    if stored_digest != computed {
        return Err(ModelError::DigestMismatch);
    }

    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| ModelError::HeaderParse(e.to_string()))?;
    let parameters: Vec<f64> = param_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let model = ModelCheckpoint {
        version_id: header.version_id,
        lineage_level: header.lineage_level,
        parent_version: header.parent_version,
        num_classes: header.num_classes,
        arch: header.arch,
        parameters,
        label_dict: header.label_dict,
        created_ts_us: header.created_ts_us,
        train_provenance: header.train_provenance,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, ModelError> {
    let data = std::fs::read(path)?;
    if data.len() < 32 {
        return Err(ModelError::Truncated);
    }
    checkpoint_from_bytes(&data)
}
