//! Binary checkpoint format.
//!
//! Little-endian: the magic `MAVLKIT1`; a `u32` length and that many bytes
//! of UTF-8 JSON holding the model config; then, until end of file, one
//! record per parameter: `u32` name length, UTF-8 name, `u32` rank, one
//! `u32` per dimension, and the raw `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MAVLKIT1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    let config = serde_json::to_vec(&params.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    for (name, t) in params.store.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Decodes a checkpoint and checks it against a freshly initialized model
/// of the stored config: same parameter names, order and shapes.
pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let config: ModelConfig =
        serde_json::from_str(&r.string("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let name = r.string("parameter name")?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.insert(name, t)?;
    }
    let expected = ModelParams::init(config.clone())?;
    if expected.store.names() != store.names() {
        return Err(Error::Checkpoint("parameter names do not match the stored config".into()));
    }
    for ((name, a), b) in expected.store.iter().zip(store.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, config implies {:?}", b.shape(), a.shape())));
        }
    }
    Ok(ModelParams { config, store })
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{model_forward, TokenQuery};

    fn small() -> ModelConfig {
        ModelConfig { image_size: 16, strides: vec![4, 8], width: 8, num_queries: 3, fusion_blocks: 2, attn_heads: 2, msda_heads: 2, mlp_hidden: 8, ..ModelConfig::default() }
    }

    #[test]
    fn load_then_save_is_byte_identical() {
        let mut p = ModelParams::init(small()).unwrap();
        p.store.get_mut("head.obj.b").unwrap().data_mut()[0] = 0.1 + 0.2;
        let bytes = encode(&p).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn forward_survives_round_trip() {
        let p = ModelParams::init(small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &p).unwrap();
        let q = load(&path).unwrap();
        let img = Tensor::from_fn(&[16, 16, 1], |i| (i % 7) as f64 / 7.0);
        let query = TokenQuery::parse("all objects").unwrap();
        assert_eq!(model_forward(&img, &query, &p).unwrap(), model_forward(&img, &query, &q).unwrap());
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = encode(&ModelParams::init(small()).unwrap()).unwrap();
        assert!(matches!(decode(b"NOTACKPT"), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..5]), Err(Error::Checkpoint(_))));
        let mut other = ModelParams::init(small()).unwrap();
        other.config.num_queries = 4;
        let mismatched = encode(&other).unwrap();
        assert!(matches!(decode(&mismatched), Err(Error::Checkpoint(_))));
    }
}
