use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::model::config::ArchConfig;
use crate::model::weights::{tensor_shapes, ModelWeights};

/// On-disk layout: the magic line `SCHU1\n`, one line of JSON header (config
/// plus the ordered tensor manifest), then raw little-endian f32 values in
/// manifest order. The float payload stays f32 even when the crate is built
/// in f64 mode.
const MAGIC: &[u8] = b"SCHU1\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ArchConfig,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(weights: &ModelWeights, config: &ArchConfig) -> Result<Vec<u8>> {
    config.validate()?;
    let named = weights.named_tensors();
    let header = Header {
        config: config.clone(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
    bytes.push(b'\n');
    for (_, tensor) in &named {
        for &x in tensor.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelWeights, ArchConfig)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing SCHU1 magic".into()));
    }
    let body = &bytes[MAGIC.len()..];
    let newline = body
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated header".into()))?;
    let header: Header = serde_json::from_slice(&body[..newline])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| Error::Format(format!("bad config in header: {e}")))?;

    let expected = tensor_shapes(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, config demands {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Format(format!(
                "tensor {:?}: manifest has {:?} {:?}, config demands {:?} {:?}",
                entry.name, entry.name, entry.shape, name, shape
            )));
        }
    }

    let floats = &body[newline + 1..];
    let expected_count: usize = expected
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    if floats.len() != expected_count * 4 {
        return Err(Error::Format(format!(
            "float payload holds {} bytes, manifest demands {}",
            floats.len(),
            expected_count * 4
        )));
    }

    let mut weights = ModelWeights::zeros(&header.config);
    let mut offset = 0usize;
    for (name, tensor) in weights.named_tensors_mut() {
        for x in tensor.data_mut() {
            let raw: [u8; 4] = floats[offset..offset + 4].try_into().unwrap();
            let v = f32::from_le_bytes(raw);
            if !v.is_finite() {
                return Err(Error::Format(format!("non-finite value in tensor {name:?}")));
            }
            *x = v as Real;
            offset += 4;
        }
    }
    Ok((weights, header.config))
}

pub fn save_checkpoint(weights: &ModelWeights, config: &ArchConfig, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(weights, config)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelWeights, ArchConfig)> {
    parse_checkpoint(&std::fs::read(path)?)
}
