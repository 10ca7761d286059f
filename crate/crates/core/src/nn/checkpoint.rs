//! Binary checkpoint: 8-byte magic, `u32` format version, `u64` header
//! length, a JSON header (architecture, seed, tensor shapes), then every
//! parameter as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchitectureSpec;
use super::model::{LayerParams, Model, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FXCNNCK1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchitectureSpec,
    seed: u64,
    /// Weight and bias shapes per layer; `None` for parameter-free layers.
    layers: Vec<Option<[Vec<usize>; 2]>>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        arch: model.arch.clone(),
        seed: model.params.seed,
        layers: model
            .params
            .layers
            .iter()
            .map(|l| l.as_ref().map(|p| [p.weight.shape().to_vec(), p.bias.shape().to_vec()]))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n: usize = model.params.tensors().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let mut values = body[hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    if (body.len() - hlen) % 8 != 0 {
        return Err(bad("parameter block is not a whole number of f64 values"));
    }
    let mut take = |shape: Vec<usize>| -> Result<Tensor> {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(bad("truncated parameter block"));
        }
        Tensor::new(shape, data)
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for l in header.layers {
        layers.push(match l {
            Some([w, b]) => Some(LayerParams {
                weight: take(w)?,
                bias: take(b)?,
            }),
            None => None,
        });
    }
    if values.next().is_some() {
        return Err(bad("trailing parameter data"));
    }
    Model::from_parts(
        header.arch,
        ModelParams {
            seed: header.seed,
            layers,
        },
    )
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}
