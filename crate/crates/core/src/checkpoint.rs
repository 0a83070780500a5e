//! Checkpoint files: an 8-byte little-endian header length, a JSON header
//! naming every tensor, then the raw little-endian `f64` data.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::smoa::SmoaConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in `f64` elements.
    pub offset: usize,
    pub len: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: BackboneConfig,
    pub smoa: Option<SmoaConfig>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len: p.numel(),
            trainable: p.requires_grad,
        });
        offset += p.numel();
        data.extend(p.value.to_le_bytes());
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        smoa: model.smoa.as_ref().map(|s| s.config),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(data);
    Ok(out)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 {
        return Err(bad("file shorter than its length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(bad("header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[..n])?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok((header, &body[n..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, data) = read_header(bytes)?;
    let mut model = Model::new(header.config.clone())?;
    if let Some(cfg) = header.smoa {
        model = model.insert_smoa(cfg, 0)?;
    }
    let entries: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let expected = model.params().len();
    if entries.len() != expected || header.tensors.len() != expected {
        return Err(bad(format!(
            "checkpoint lists {} tensors, model has {expected}",
            header.tensors.len()
        )));
    }
    for p in model.params_mut() {
        let e = entries
            .get(p.name.as_str())
            .ok_or_else(|| bad(format!("missing tensor {}", p.name)))?;
        if e.shape != p.value.shape() || e.len != p.numel() {
            return Err(bad(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name,
                e.shape,
                p.value.shape()
            )));
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > data.len() {
            return Err(bad(format!("tensor {} runs past the end of the file", p.name)));
        }
        for (v, chunk) in p.value.data_mut().iter_mut().zip(data[start..end].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        p.requires_grad = e.trainable;
        p.grad = None;
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncodedPair;

    fn model() -> Model {
        let cfg = BackboneConfig {
            vocab_size: 40,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_len: 12,
            n_classes: 3,
            seed: 3,
        };
        Model::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_preserves_values_and_mask() {
        let mut m = model()
            .insert_smoa(
                SmoaConfig {
                    n_adapters: 3,
                    top_k: 2,
                    bottleneck: 4,
                },
                5,
            )
            .unwrap();
        for p in m.smoa.as_mut().unwrap().params_mut() {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += 0.01 * i as f64;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.backbone_hash(), m.backbone_hash());
        assert_eq!(back.trainable_params(), m.trainable_params());
        let pair = [EncodedPair::new(&[5, 6], &[7, 8, 9])];
        assert_eq!(back.logits(&pair).unwrap(), m.logits(&pair).unwrap());
        assert_eq!(to_bytes(&back).unwrap(), to_bytes(&m).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Checkpoint(_))));
        assert!(from_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn header_lists_every_tensor() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let (h, data) = read_header(&bytes).unwrap();
        assert_eq!(h.tensors.len(), m.params().len());
        assert_eq!(data.len(), 8 * m.total_params());
        assert!(h.smoa.is_none());
    }
}
