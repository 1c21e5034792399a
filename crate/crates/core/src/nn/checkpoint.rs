//! Checkpoint files: `OVNET001`, a little-endian u32 header length, a JSON
//! header with the layer table, then every weight as little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::shape_len;
use super::{InputShape, Layer, LayerKind, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OVNET001";

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    kind: LayerKind,
    weight_shape: Vec<usize>,
    weight_offset: usize,
    bias_shape: Vec<usize>,
    bias_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input: InputShape,
    layers: Vec<LayerEntry>,
    total_weights: usize,
}

pub fn encode_params(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    params.validate()?;
    let mut offset = 0;
    let mut layers = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        let weight_offset = offset;
        offset += l.weight.len();
        let bias_offset = offset;
        offset += l.bias.len();
        layers.push(LayerEntry {
            kind: l.kind,
            weight_shape: l.kind.weight_shape(),
            weight_offset,
            bias_shape: l.kind.bias_shape(),
            bias_offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        input: params.input,
        layers,
        total_weights: offset,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for l in &params.layers {
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let truncated = |needed: usize| Error::Truncated {
        what: "checkpoint",
        needed,
        available: bytes.len(),
    };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpointMagic);
    }
    let len_bytes = bytes.get(8..12).ok_or_else(|| truncated(12))?;
    let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or_else(|| truncated(12 + header_len))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    let blob = &bytes[12 + header_len..];
    if blob.len() < 4 * header.total_weights {
        return Err(truncated(12 + header_len + 4 * header.total_weights));
    }
    if blob.len() != 4 * header.total_weights {
        return Err(Error::ShapeTable(format!(
            "{} trailing bytes after the weight blob",
            blob.len() - 4 * header.total_weights
        )));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut expected_offset = 0;
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, e) in header.layers.into_iter().enumerate() {
        if e.weight_shape != e.kind.weight_shape() || e.bias_shape != e.kind.bias_shape() {
            return Err(Error::ShapeTable(format!(
                "layer {i} ({}) shapes {:?}/{:?} disagree with its kind",
                e.kind.name(),
                e.weight_shape,
                e.bias_shape
            )));
        }
        let wn = shape_len(&e.weight_shape);
        let bn = shape_len(&e.bias_shape);
        if e.weight_offset != expected_offset || e.bias_offset != expected_offset + wn {
            return Err(Error::ShapeTable(format!("layer {i} offsets are not contiguous")));
        }
        expected_offset += wn + bn;
        if expected_offset > values.len() {
            return Err(Error::ShapeTable(format!("layer {i} runs past the weight blob")));
        }
        layers.push(Layer {
            kind: e.kind,
            weight: values[e.weight_offset..e.weight_offset + wn].to_vec(),
            bias: values[e.bias_offset..e.bias_offset + bn].to_vec(),
        });
    }
    if expected_offset != header.total_weights {
        return Err(Error::ShapeTable(format!(
            "layers hold {expected_offset} weights, header says {}",
            header.total_weights
        )));
    }
    let params = ModelParams {
        input: header.input,
        layers,
    };
    params
        .validate()
        .map_err(|e| Error::ShapeTable(e.to_string()))?;
    Ok(params)
}

pub fn save_params(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    decode_params(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
