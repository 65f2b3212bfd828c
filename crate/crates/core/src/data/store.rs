//! Binary embedding store.
//!
//! Little-endian layout:
//!
//! | field          | type                 |
//! |----------------|----------------------|
//! | magic          | `b"MHED"`            |
//! | version        | u32 (currently 1)    |
//! | embedding_dim  | u32                  |
//! | record count   | u64                  |
//! | index entries  | count × (u16 id length, UTF-8 id, u64 payload offset) |
//! | payloads       | embedding_dim × f32 per record                        |
//!
//! Payload offsets are absolute byte offsets from the start of the file.
//! The writer lays payloads out contiguously in index order directly after
//! the index block.

use std::collections::HashMap;
use std::path::Path;

use super::DatasetManifest;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"MHED";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// In-memory view of an embedding store. Lookups take `&self`, so a
/// store can be shared between reader threads.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f32>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Store {
                offset: self.bytes.len() as u64,
                msg: format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl EmbeddingStore {
    /// Builds a store from `(image_id, features)` pairs, keeping their order.
    pub fn from_records(dim: usize, records: Vec<(String, Vec<f32>)>) -> Result<Self> {
        if dim > u32::MAX as usize {
            return Err(Error::Data(format!("embedding dim {dim} too large")));
        }
        let mut store = Self {
            dim,
            ids: Vec::with_capacity(records.len()),
            index: HashMap::with_capacity(records.len()),
            values: Vec::with_capacity(records.len() * dim),
        };
        for (id, v) in records {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding for '{id}' has length {}, store dim is {dim}",
                    v.len()
                )));
            }
            if let Some(j) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "embedding for '{id}' has a non-finite value at position {j}"
                )));
            }
            if id.len() > u16::MAX as usize {
                return Err(Error::Data(format!("image id too long: {} bytes", id.len())));
            }
            if store.index.insert(id.clone(), store.ids.len()).is_some() {
                return Err(Error::Data(format!("duplicate image_id '{id}' in store")));
            }
            store.ids.push(id);
            store.values.extend_from_slice(&v);
        }
        Ok(store)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parses and fully validates a store image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "header")?;
        if magic != STORE_MAGIC {
            return Err(Error::Store {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected \"MHED\""),
            });
        }
        let version = cur.u32("header")?;
        if version != STORE_VERSION {
            return Err(Error::Store {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let dim = cur.u32("header")? as usize;
        let count = cur.u64("header")?;
        debug_assert_eq!(cur.pos, HEADER_LEN);

        // every index entry takes at least 10 bytes
        if count > (bytes.len() as u64) / 10 {
            return Err(Error::Store {
                offset: 12,
                msg: format!("record count {count} cannot fit in {} bytes", bytes.len()),
            });
        }
        let count = count as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let entry_at = cur.pos as u64;
            let len = cur.u16("index entry")? as usize;
            let raw = cur.take(len, "index entry")?;
            let id = std::str::from_utf8(raw).map_err(|_| Error::Store {
                offset: entry_at + 2,
                msg: "image id is not valid UTF-8".into(),
            })?;
            let offset = cur.u64("index entry")?;
            entries.push((id.to_string(), offset, entry_at));
        }
        let index_end = cur.pos as u64;
        let payload_len = (dim * 4) as u64;

        let mut values = Vec::with_capacity(count * dim);
        let mut ids = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        let mut max_end = index_end;
        for (id, offset, entry_at) in entries {
            if offset < index_end {
                return Err(Error::Store {
                    offset: entry_at,
                    msg: format!("payload offset {offset} for '{id}' points into the header/index"),
                });
            }
            let end = offset.saturating_add(payload_len);
            if end > bytes.len() as u64 {
                return Err(Error::Store {
                    offset: bytes.len() as u64,
                    msg: format!(
                        "truncated payload for '{id}': expected bytes {offset}..{end}, file has {}",
                        bytes.len()
                    ),
                });
            }
            let payload = &bytes[offset as usize..end as usize];
            for (j, chunk) in payload.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Store {
                        offset: offset + 4 * j as u64,
                        msg: format!("non-finite value {v} in embedding of '{id}' at position {j}"),
                    });
                }
                values.push(v);
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::Store {
                    offset: entry_at,
                    msg: format!("duplicate image_id '{id}'"),
                });
            }
            ids.push(id);
            max_end = max_end.max(end);
        }
        if max_end != bytes.len() as u64 {
            return Err(Error::Store {
                offset: max_end,
                msg: format!("{} trailing bytes after last payload", bytes.len() as u64 - max_end),
            });
        }
        Ok(Self {
            dim,
            ids,
            index,
            values,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let index_len: usize = self.ids.iter().map(|id| 2 + id.len() + 8).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + index_len + self.values.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        let mut offset = (HEADER_LEN + index_len) as u64;
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (self.dim * 4) as u64;
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), &self.values[i * self.dim..(i + 1) * self.dim]))
    }

    /// Features of `id` widened to 64 bits.
    pub fn features_f64(&self, id: &str) -> Result<Vec<f64>> {
        self.get(id)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| Error::Data(format!("no embedding for image '{id}'")))
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim != expected {
            return Err(Error::Shape(format!(
                "embedding store has dim {}, configuration expects {expected}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Fails with the list of manifest ids that have no embedding.
    pub fn check_covers(&self, manifest: &DatasetManifest) -> Result<()> {
        let missing: Vec<&str> = manifest
            .records
            .iter()
            .map(|r| r.image_id.as_str())
            .filter(|id| !self.index.contains_key(*id))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let shown = missing.iter().take(20).copied().collect::<Vec<_>>().join(", ");
        Err(Error::Data(format!(
            "{} manifest ids missing from embedding store: {shown}{}",
            missing.len(),
            if missing.len() > 20 { ", ..." } else { "" }
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: usize, dim: usize) -> EmbeddingStore {
        let recs = (0..n)
            .map(|i| (format!("img{i}"), (0..dim).map(|j| (i * dim + j) as f32 * 0.5).collect()))
            .collect();
        EmbeddingStore::from_records(dim, recs).unwrap()
    }

    #[test]
    fn reports_count_and_dim() {
        let s = EmbeddingStore::from_bytes(&sample(5, 1024).to_bytes()).unwrap();
        assert_eq!((s.len(), s.dim()), (5, 1024));
        assert_eq!(s.get("img3").unwrap()[1], (3 * 1024 + 1) as f32 * 0.5);
    }

    #[test]
    fn empty_store_is_valid() {
        let s = EmbeddingStore::from_bytes(&sample(0, 8).to_bytes()).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.iter().count(), 0);
    }

    #[test]
    fn layout_is_exact() {
        let s = EmbeddingStore::from_records(2, vec![("ab".into(), vec![1.0, -2.0])]).unwrap();
        let b = s.to_bytes();
        let mut expect = b"MHED".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.extend(32u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn dimension_mismatch() {
        let s = sample(2, 1536);
        assert!(matches!(s.check_dim(1024), Err(Error::Shape(_))));
        s.check_dim(1536).unwrap();
    }

    #[test]
    fn structural_errors_carry_offsets() {
        let good = sample(3, 4).to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(Error::Store { offset: 0, .. })));

        let truncated = &good[..good.len() - 3];
        let err = EmbeddingStore::from_bytes(truncated).unwrap_err();
        assert!(matches!(err, Error::Store { offset, .. } if offset == truncated.len() as u64));
        assert!(err.to_string().contains("img2"));

        let mut nan = good.clone();
        let at = good.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = EmbeddingStore::from_bytes(&nan).unwrap_err();
        assert!(matches!(err, Error::Store { offset, .. } if offset == at as u64));
        assert!(err.to_string().contains("img2"));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(EmbeddingStore::from_bytes(&trailing).is_err());
        assert!(EmbeddingStore::from_bytes(&good[..10]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 0..60), dim in 1usize..6) {
            let vals: Vec<f32> = bits.into_iter().map(f32::from_bits).filter(|v| v.is_finite()).collect();
            let n = vals.len() / dim;
            let recs = (0..n).map(|i| (format!("r{i}"), vals[i * dim..(i + 1) * dim].to_vec())).collect();
            let s = EmbeddingStore::from_records(dim, recs).unwrap();
            let back = EmbeddingStore::from_bytes(&s.to_bytes()).unwrap();
            for ((a, va), (b, vb)) in s.iter().zip(back.iter()) {
                prop_assert_eq!(a, b);
                let ba: Vec<u32> = va.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = vb.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ba, bb);
            }
            prop_assert_eq!(back.to_bytes(), s.to_bytes());
        }
    }
}
