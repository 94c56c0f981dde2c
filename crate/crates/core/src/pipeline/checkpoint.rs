//! Binary checkpoint format.
//!
//! ```text
//! "BSMK"  u32 version
//! u32 config length, config text (`key = value` lines)
//! u32 tensor count
//! per tensor: u16 name length, name, u8 dtype, u8 ndim, ndim × u32 dims,
//!             u64 payload offset
//! payloads (little-endian, offsets relative to the first payload byte)
//! u32 CRC32 of everything above
//! ```

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::tensor::{numel, DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"BSMK";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode<T: Real>(cfg: &ModelConfig, params: &ParamStore<T>) -> Result<Vec<u8>> {
    let text = cfg.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        if name.len() > u16::MAX as usize {
            return Err(bad(format!("tensor name too long: {name}")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.numel() * T::DTYPE.size()) as u64;
    }
    for (_, t) in params.iter() {
        for &v in t.data() {
            v.to_le_bytes_vec(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decoded checkpoint; tensors are converted to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<T>)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let clen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(clen)?).map_err(|_| bad("config block is not UTF-8"))?;
    let cfg = ModelConfig::from_text(text).map_err(|e| bad(format!("config block: {e}")))?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| bad(format!("unknown dtype for '{name}'")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        if !seen.insert(name.clone()) {
            return Err(bad(format!("duplicate tensor '{name}'")));
        }
        entries.push((name, dtype, shape, offset));
    }
    let payload = &body[r.pos..];
    let mut store = ParamStore::new();
    for (name, dtype, shape, offset) in entries {
        let n = numel(&shape);
        let len = n * dtype.size();
        let raw = payload
            .get(offset..offset + len)
            .ok_or_else(|| bad(format!("payload of '{name}' out of range")))?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        store.insert(name, Tensor::new(&shape, data)?);
    }
    Ok((cfg, store))
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub fn save<T: Real>(path: &Path, cfg: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    let bytes = encode(cfg, params)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(ModelConfig, ParamStore<T>)> {
    let bytes = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ModelConfig, ParamStore<f64>) {
        let cfg = ModelConfig {
            channels: 4,
            denet_width: 4,
            ..ModelConfig::default()
        };
        let store = Model::new(cfg.clone()).unwrap().init(&mut ChaCha8Rng::seed_from_u64(1));
        (cfg, store)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, store) = small();
        let (c2, s2) = decode::<f64>(&encode(&cfg, &store).unwrap()).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2, store);
    }

    #[test]
    fn corruption_is_detected() {
        let (cfg, store) = small();
        let mut bytes = encode(&cfg, &store).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(decode::<f64>(b"BSMX0000000000"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bsmk");
        let (cfg, store) = small();
        save(&p, &cfg, &store).unwrap();
        save(&p, &cfg, &store).unwrap();
        let (_, s2) = load::<f64>(&p).unwrap();
        assert_eq!(s2, store);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
