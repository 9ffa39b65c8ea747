//! Portable checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "LXCKPT\0\0"
//! version      u32      1
//! dtype width  u8       4 (f32) or 8 (f64)
//! config len   u32      followed by that many bytes of `key=value` text
//! vocab hash   32 bytes SHA-256 of the vocabulary tokens
//! n params     u32
//! per parameter:
//!   name len u32, name bytes (UTF-8), trainable u8, ndim u32,
//!   dims u64 × ndim, payload = product(dims) floats of dtype width
//! ```

use std::path::Path;

use super::{ParamStore, TransformerConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LXCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TransformerConfig,
    pub vocab_hash: [u8; 32],
    pub store: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.vocab_hash);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&(p.tensor.shape.len() as u32).to_le_bytes());
            for &d in &p.tensor.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &p.tensor.data {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptArtifact { path: path.to_path_buf(), msg: msg.to_string() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| corrupt("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let width = r.take(1).ok_or_else(|| corrupt("truncated header"))?[0] as usize;
        if width != T::BYTES {
            return Err(corrupt(&format!("payload width {width} does not match {}", T::NAME)));
        }
        let cfg_len = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
        let cfg_text = r.take(cfg_len).ok_or_else(|| corrupt("truncated config"))?;
        let cfg_text = std::str::from_utf8(cfg_text).map_err(|_| corrupt("config is not UTF-8"))?;
        let config = TransformerConfig::parse_text(cfg_text).map_err(|e| corrupt(&e.to_string()))?;
        let mut vocab_hash = [0u8; 32];
        vocab_hash.copy_from_slice(r.take(32).ok_or_else(|| corrupt("truncated vocab hash"))?);
        let n = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name_len = r.u32().ok_or_else(|| corrupt("truncated parameter"))? as usize;
            let name = r.take(name_len).ok_or_else(|| corrupt("truncated parameter name"))?;
            let name = std::str::from_utf8(name).map_err(|_| corrupt("parameter name is not UTF-8"))?.to_string();
            if store.id(&name).is_some() {
                return Err(corrupt(&format!("duplicate parameter {name}")));
            }
            let trainable = r.take(1).ok_or_else(|| corrupt("truncated parameter"))?[0] != 0;
            let ndim = r.u32().ok_or_else(|| corrupt("truncated parameter"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().ok_or_else(|| corrupt("truncated shape"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * width).ok_or_else(|| corrupt(&format!("truncated payload for {name}")))?;
            let data: Vec<T> = payload.chunks_exact(width).map(T::read_le).collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(corrupt(&format!("non-finite value in {name}")));
            }
            let id = store.add(name, shape, data);
            store.set_trainable(id, trainable);
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { config, vocab_hash, store })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::add_encoder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint<f32> {
        let cfg = TransformerConfig { vocab_size: 11, model_dim: 8, heads: 2, ffn_dim: 16, ..Default::default() };
        let mut store = ParamStore::new();
        let layout = add_encoder(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        store.set_trainable(layout.emb.tokens, false);
        Checkpoint { config: cfg, vocab_hash: [7; 32], store }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes, Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad, Path::new("x")).is_err());
    }
}
