//! `TKNN` model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TKNN" | version: u32 = 1 | layer count: u32 | layers...
//! layer := tag: u8 (0 Dense, 1 ReLU, 2 Softmax)
//!          Dense only: out: u32 | in: u32 | weights f32[out*in] | bias f32[out]
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Layer, Tensor, VictimModel};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"TKNN";
pub const MODEL_VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_SOFTMAX: u8 = 2;

/// Serialize the layers of a model. Bindings are not part of the file.
pub fn encode_model(model: &VictimModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        match layer {
            Layer::Dense { weights, bias } => {
                out.push(TAG_DENSE);
                out.extend_from_slice(&(weights.shape()[0] as u32).to_le_bytes());
                out.extend_from_slice(&(weights.shape()[1] as u32).to_le_bytes());
                for v in weights.data().iter().chain(bias.data()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Layer::Relu => out.push(TAG_RELU),
            Layer::Softmax => out.push(TAG_SOFTMAX),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(field, format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn err(&self, field: &'static str, reason: String) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            field,
            offset: self.pos as u64,
            reason,
        }
    }
}

/// Parse a `TKNN` byte stream into an unbound model. `origin` names the
/// source in error messages.
pub fn decode_model(bytes: &[u8], origin: &str) -> Result<VictimModel> {
    let mut rd = Reader {
        bytes,
        pos: 0,
        path: origin,
    };
    if rd.take(4, "magic")? != MODEL_MAGIC {
        rd.pos = 0;
        return Err(rd.err("magic", "wrong magic, expected \"TKNN\"".into()));
    }
    let version = rd.u32("version")?;
    if version != MODEL_VERSION {
        rd.pos -= 4;
        return Err(rd.err("version", format!("unsupported version {version}")));
    }
    let count = rd.u32("layer count")?;
    let mut layers = Vec::new();
    for _ in 0..count {
        let tag = rd.take(1, "layer tag")?[0];
        let layer = match tag {
            TAG_DENSE => {
                let out = rd.u32("dense out dim")? as usize;
                let inp = rd.u32("dense in dim")? as usize;
                let n = out
                    .checked_mul(inp)
                    .and_then(|v| v.checked_add(out))
                    .and_then(|v| v.checked_mul(4))
                    .ok_or_else(|| rd.err("dense dims", format!("{out} x {inp} overflows")))?;
                let raw = rd.take(n, "dense parameters")?;
                let values: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let (w, b) = values.split_at(out * inp);
                let weights = Tensor::new(vec![out, inp], w.to_vec())
                    .map_err(|e| rd.err("dense weights", e.to_string()))?;
                let bias = Tensor::new(vec![out], b.to_vec()).map_err(|e| rd.err("dense bias", e.to_string()))?;
                Layer::Dense { weights, bias }
            }
            TAG_RELU => Layer::Relu,
            TAG_SOFTMAX => Layer::Softmax,
            other => {
                rd.pos -= 1;
                return Err(rd.err("layer tag", format!("unknown layer tag {other}")));
            }
        };
        layers.push(layer);
    }
    if rd.pos != bytes.len() {
        return Err(rd.err("trailer", format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    VictimModel::new(layers).map_err(|e| Error::Parse {
        path: origin.to_string(),
        field: "layers",
        offset: bytes.len() as u64,
        reason: e.to_string(),
    })
}

pub fn write_model(model: &VictimModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<VictimModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, &path.display().to_string())
}

/// Hex SHA-256 of the encoded model.
pub fn model_hash(model: &VictimModel) -> String {
    hex::encode(Sha256::digest(encode_model(model)))
}
