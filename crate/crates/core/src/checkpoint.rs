//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "FEMTCKPT"
//! version    u32       1
//! header     u32 length + UTF-8 JSON (model config and run metadata)
//! count      u32       number of tensors
//! per tensor:
//!   name     u16 length + UTF-8
//!   ndim     u8
//!   dims     ndim x u64
//!   payload  prod(dims) x f64, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};

pub const MAGIC: &[u8; 8] = b"FEMTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub config_hash: String,
    pub fastemit_lambda: f64,
    pub steps: usize,
}

pub fn encode(header: &CheckpointHeader, params: &Parameters) -> Result<Vec<u8>> {
    if header.model != *params.config() {
        return Err(Error::Config(
            "checkpoint header does not describe these parameters".into(),
        ));
    }
    let mut out = Vec::with_capacity(64 + params.as_slice().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(header).map_err(|e| Error::Config(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.layout().len() as u32).to_le_bytes());
    for spec in params.layout() {
        out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        let shape = spec.shape();
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &params.as_slice()[spec.offset..spec.offset + spec.len()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(CheckpointHeader, Parameters), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| format!("header: {e}"))?;
    let mut params = Parameters::zeros(&header.model).map_err(|e| e.to_string())?;
    let count = r.u32()? as usize;
    if count != params.layout().len() {
        return Err(format!(
            "{count} tensors, the model has {}",
            params.layout().len()
        ));
    }
    for i in 0..count {
        let spec = params.layout()[i].clone();
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| e.to_string())?;
        if name != spec.name {
            return Err(format!("tensor {i} is {name:?}, expected {:?}", spec.name));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if dims != spec.shape() {
            return Err(format!(
                "{name}: shape {dims:?}, expected {:?}",
                spec.shape()
            ));
        }
        let payload = r.take(spec.len() * 8)?;
        let dst = &mut params.as_mut_slice()[spec.offset..spec.offset + spec.len()];
        for (d, chunk) in dst.iter_mut().zip(payload.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((header, params))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &Parameters) -> Result<()> {
    let bytes = encode(header, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Parameters)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(model: ModelConfig) -> CheckpointHeader {
        CheckpointHeader {
            model,
            config_hash: "0123abcd".into(),
            fastemit_lambda: 0.01,
            steps: 7,
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in 0u64..1000, dim in 1usize..6, vocab in 2usize..5) {
            let model = ModelConfig {
                feature_dim: dim + 1,
                encoder_dim: dim,
                predictor_dim: dim + 2,
                joint_dim: 3,
                vocab_size: vocab,
                endpointer: seed % 2 == 0,
                seed,
            };
            let mut params = Parameters::init(&model).unwrap();
            // Include awkward values: negative zero, subnormals, extremes.
            params.as_mut_slice()[0] = -0.0;
            params.as_mut_slice()[1] = f64::MIN_POSITIVE / 3.0;
            params.as_mut_slice()[2] = f64::MAX;
            let h = header(model);
            let bytes = encode(&h, &params).unwrap();
            let (h2, p2) = decode(&bytes).unwrap();
            prop_assert_eq!(&h2, &h);
            let a: Vec<u64> = params.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = p2.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(encode(&h2, &p2).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let params = Parameters::init(&ModelConfig::default()).unwrap();
        let bytes = encode(&header(ModelConfig::default()), &params).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
