//! Binary weights file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "BCPW"
//! version u16      currently 1
//! count   u32      number of entries
//! entry:  name_len u16, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!         rank u8 (4), dims u32 * rank, raw little-endian scalars
//! ```
//!
//! Round-trips are bit-exact in both precisions. The loader validates the
//! magic, version and per-entry byte accounting before accepting anything,
//! and reports the byte offset of the first inconsistency.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::WeightStore;
use crate::tensor::{Scalar, Tensor4};

pub const MAGIC: [u8; 4] = *b"BCPW";
pub const FORMAT_VERSION: u16 = 1;

pub fn save_weights<S: Scalar>(store: &WeightStore<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(S::DTYPE_TAG);
        out.push(4u8);
        let (n, c, h, w) = tensor.shape();
        for dim in [n, c, h, w] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn load_weights<S: Scalar>(path: impl AsRef<Path>) -> Result<WeightStore<S>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:02x?}") });
    }
    let version = cur.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version} (expected {FORMAT_VERSION})"),
        });
    }
    let count = cur.u32("entry count")?;

    let mut store = WeightStore::new();
    for entry in 0..count {
        let name_offset = cur.pos as u64;
        let name_len = cur.u16("name length")? as usize;
        let name_bytes = cur.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format {
                offset: name_offset,
                msg: format!("entry {entry} name is not UTF-8"),
            })?
            .to_string();
        let dtype = cur.u8("dtype")?;
        if dtype != S::DTYPE_TAG {
            return Err(Error::Format {
                offset: (cur.pos - 1) as u64,
                msg: format!(
                    "entry '{name}' has dtype tag {dtype}, expected {}",
                    S::DTYPE_TAG
                ),
            });
        }
        let rank = cur.u8("rank")?;
        if rank != 4 {
            return Err(Error::Format {
                offset: (cur.pos - 1) as u64,
                msg: format!("entry '{name}' has rank {rank}, expected 4"),
            });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32("dimension")? as usize;
        }
        let len = dims.iter().product::<usize>();
        let data_offset = cur.pos as u64;
        let raw = cur.take(len * S::BYTE_WIDTH, "tensor data")?;
        let mut data = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(S::BYTE_WIDTH) {
            data.push(S::read_le(chunk));
        }
        let tensor = Tensor4::from_vec((dims[0], dims[1], dims[2], dims[3]), data)
            .map_err(|e| Error::Format { offset: data_offset, msg: format!("entry '{name}': {e}") })?;
        if store.get(&name).is_ok() {
            return Err(Error::Format {
                offset: name_offset,
                msg: format!("duplicate entry name '{name}'"),
            });
        }
        store.insert(name, tensor);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes after the last entry", bytes.len() - cur.pos),
        });
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_store(seed: u64) -> WeightStore<f32> {
        let mut rng = Rng::new(seed);
        let mut store = WeightStore::new();
        for (name, shape) in
            [("a.w", (4, 3, 3, 3)), ("b.scale", (1, 7, 1, 1)), ("c.theta", (1, 1, 1, 1))]
        {
            store.insert(
                name,
                Tensor4::from_fn(shape, |_, _, _, _| rng.normal() as f32).unwrap(),
            );
        }
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("bcpw_roundtrip_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.bcpw");
        let store = random_store(5);
        save_weights(&store, &path).unwrap();
        let loaded: WeightStore<f32> = load_weights(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (name, tensor) in store.iter() {
            let other = loaded.get(name).unwrap();
            assert_eq!(tensor.shape(), other.shape());
            for (a, b) in tensor.data().iter().zip(other.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn round_trip_f64() {
        let dir = std::env::temp_dir().join("bcpw_roundtrip_f64");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w64.bcpw");
        let mut store: WeightStore<f64> = WeightStore::new();
        store.insert("x", Tensor4::from_vec((1, 1, 1, 3), vec![1.0, -0.25, 1e-300]).unwrap());
        save_weights(&store, &path).unwrap();
        let loaded: WeightStore<f64> = load_weights(&path).unwrap();
        assert_eq!(loaded.get("x").unwrap().data(), store.get("x").unwrap().data());
    }

    #[test]
    fn empty_store_valid() {
        let dir = std::env::temp_dir().join("bcpw_empty");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.bcpw");
        save_weights(&WeightStore::<f32>::new(), &path).unwrap();
        let loaded: WeightStore<f32> = load_weights(&path).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn truncation_detected_with_offset() {
        let dir = std::env::temp_dir().join("bcpw_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bcpw");
        save_weights(&random_store(9), &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &full[..full.len() - 5]).unwrap();
        match load_weights::<f32>(&cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_dtype_mismatch_rejected() {
        let dir = std::env::temp_dir().join("bcpw_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bcpw");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_weights::<f32>(&path), Err(Error::Format { .. })));

        let path2 = dir.join("f32.bcpw");
        save_weights(&random_store(1), &path2).unwrap();
        assert!(matches!(load_weights::<f64>(&path2), Err(Error::Format { .. })));
    }
}
