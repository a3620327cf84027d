//! Multi-view embedding tensors and their binary file format.
//!
//! Every item carries `H` head views of width `d_h` and, when the store has a
//! global slot, one global vector of width `d`. The layout is documented in
//! `FORMAT.md` at the repository root.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PXE1";
pub const VERSION: u32 = 1;

/// Store key of an entity label.
pub fn entity_key(label: &str) -> String {
    format!("e:{label}")
}

/// Store key of a relation label.
pub fn relation_key(label: &str) -> String {
    format!("r:{label}")
}

/// Store key of a query id.
pub fn query_key(id: &str) -> String {
    format!("q:{id}")
}

/// Head views plus an optional global vector for one text item.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewEmbedding {
    pub heads: Vec<Vec<f32>>,
    pub global: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    num_heads: usize,
    head_dim: usize,
    global_dim: usize,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(num_heads: usize, head_dim: usize, global_dim: usize) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::Format(format!(
                "head count and head width must be positive (H={num_heads}, d_h={head_dim})"
            )));
        }
        Ok(Self {
            ids: Vec::new(),
            index: HashMap::new(),
            num_heads,
            head_dim,
            global_dim,
            data: Vec::new(),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
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

    fn stride(&self) -> usize {
        self.num_heads * self.head_dim + self.global_dim
    }

    pub fn push(&mut self, id: impl Into<String>, item: &MultiViewEmbedding) -> Result<()> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(Error::Format(format!("duplicate item id {id:?}")));
        }
        if item.heads.len() != self.num_heads {
            return Err(Error::Format(format!("item {id:?} has {} heads, store expects {}", item.heads.len(), self.num_heads)));
        }
        if item.heads.iter().any(|h| h.len() != self.head_dim) {
            return Err(Error::Format(format!("item {id:?} has a head view of the wrong width")));
        }
        match (&item.global, self.global_dim) {
            (None, 0) => {}
            (Some(g), d) if g.len() == d => {}
            _ => return Err(Error::Format(format!("item {id:?} global view does not match d={}", self.global_dim))),
        }
        let finite = item.heads.iter().flatten().chain(item.global.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format(format!("item {id:?} has non-finite values")));
        }
        for h in &item.heads {
            self.data.extend_from_slice(h);
        }
        if let Some(g) = &item.global {
            self.data.extend_from_slice(g);
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        Ok(())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn head_view(&self, item: usize, head: usize) -> &[f32] {
        let off = item * self.stride() + head * self.head_dim;
        &self.data[off..off + self.head_dim]
    }

    /// All head views of an item, concatenated.
    pub fn head_views(&self, item: usize) -> &[f32] {
        let off = item * self.stride();
        &self.data[off..off + self.num_heads * self.head_dim]
    }

    pub fn global_view(&self, item: usize) -> Option<&[f32]> {
        if self.global_dim == 0 {
            return None;
        }
        let off = item * self.stride() + self.num_heads * self.head_dim;
        Some(&self.data[off..off + self.global_dim])
    }

    pub fn get(&self, id: &str) -> Option<MultiViewEmbedding> {
        let i = self.index_of(id)?;
        Some(MultiViewEmbedding {
            heads: (0..self.num_heads).map(|k| self.head_view(i, k).to_vec()).collect(),
            global: self.global_view(i).map(<[f32]>::to_vec),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.ids.len() as u32, self.num_heads as u32, self.head_dim as u32, self.global_dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a PXE1 store".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let num_heads = cur.u32()? as usize;
        let head_dim = cur.u32()? as usize;
        let global_dim = cur.u32()? as usize;
        let mut store = Self::new(num_heads, head_dim, global_dim)?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = cur.u32()? as usize;
            let raw = cur.take(n)?;
            let id = std::str::from_utf8(raw).map_err(|_| Error::Format("item id is not UTF-8".into()))?;
            ids.push(id.to_owned());
        }
        let floats = count
            .checked_mul(store.stride())
            .ok_or_else(|| Error::Format("dimension header overflows".into()))?;
        let remaining = bytes.len() - cur.pos;
        if remaining < floats * 4 {
            return Err(Error::Format(format!("truncated payload: expected {} bytes, found {remaining}", floats * 4)));
        }
        if remaining > floats * 4 {
            return Err(Error::Format(format!(
                "payload has {remaining} bytes but the header implies {}; dimension header inconsistent",
                floats * 4
            )));
        }
        store.data = cur.bytes[cur.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        for (i, id) in ids.iter().enumerate() {
            if store.index.insert(id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate item id {id:?}")));
            }
        }
        store.ids = ids;
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `items` to `path`; all items must share the same geometry.
pub fn write_store(items: &[(String, MultiViewEmbedding)], path: impl AsRef<Path>) -> Result<()> {
    let first = items
        .first()
        .ok_or_else(|| Error::Format("cannot infer geometry of an empty item list".into()))?;
    let head_dim = first.1.heads.first().map_or(0, Vec::len);
    let global_dim = first.1.global.as_ref().map_or(0, Vec::len);
    let mut store = EmbeddingStore::new(first.1.heads.len(), head_dim, global_dim)?;
    for (id, item) in items {
        store.push(id.clone(), item)?;
    }
    store.write(path)
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    EmbeddingStore::read(path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(h: usize, dh: usize, d: usize, base: f32) -> MultiViewEmbedding {
        MultiViewEmbedding {
            heads: (0..h).map(|k| (0..dh).map(|i| base + (k * dh + i) as f32).collect()).collect(),
            global: (d > 0).then(|| (0..d).map(|i| -base - i as f32).collect()),
        }
    }

    #[test]
    fn single_item_layout() {
        let mut s = EmbeddingStore::new(2, 3, 0).unwrap();
        s.push("q", &item(2, 3, 0, 0.5)).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 4 + 5 * 4 + 4 + 1 + 6 * 4);
        let mut g = EmbeddingStore::new(2, 3, 4).unwrap();
        g.push("q", &item(2, 3, 4, 0.5)).unwrap();
        assert_eq!(g.to_bytes().len(), bytes.len() + 16);
        assert_eq!(EmbeddingStore::from_bytes(&g.to_bytes()).unwrap(), g);
    }

    #[test]
    fn sixteen_heads_accepted() {
        let mut s = EmbeddingStore::new(16, 4, 64).unwrap();
        s.push("x", &item(16, 4, 64, 1.0)).unwrap();
        let back = EmbeddingStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back.num_heads(), 16);
        assert_eq!(back.get("x").unwrap(), item(16, 4, 64, 1.0));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut s = EmbeddingStore::new(1, 2, 0).unwrap();
        s.push("a", &item(1, 2, 0, 0.0)).unwrap();
        let good = s.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(EmbeddingStore::from_bytes(truncated), Err(Error::Format(m)) if m.contains("truncated")));

        let mut bad = good.clone();
        bad[16..20].copy_from_slice(&1u32.to_le_bytes()); // d_h 2 → 1
        assert!(matches!(EmbeddingStore::from_bytes(&bad), Err(Error::Format(m)) if m.contains("inconsistent")));
    }

    #[test]
    fn push_validates_geometry() {
        let mut s = EmbeddingStore::new(2, 3, 0).unwrap();
        assert!(s.push("a", &item(3, 3, 0, 0.0)).is_err());
        assert!(s.push("a", &item(2, 2, 0, 0.0)).is_err());
        assert!(s.push("a", &item(2, 3, 5, 0.0)).is_err());
        let mut nan = item(2, 3, 0, 0.0);
        nan.heads[1][2] = f32::NAN;
        assert!(s.push("a", &nan).is_err());
        assert!(EmbeddingStore::new(0, 3, 0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            h in 1usize..5,
            dh in 1usize..6,
            d in 0usize..5,
            raw in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO | proptest::num::f32::SUBNORMAL, 1..200),
        ) {
            let stride = h * dh + d;
            let n = raw.len() / stride;
            let mut s = EmbeddingStore::new(h, dh, d).unwrap();
            for i in 0..n {
                let chunk = &raw[i * stride..(i + 1) * stride];
                let e = MultiViewEmbedding {
                    heads: chunk[..h * dh].chunks(dh).map(<[f32]>::to_vec).collect(),
                    global: (d > 0).then(|| chunk[h * dh..].to_vec()),
                };
                s.push(format!("item-{i}-é"), &e).unwrap();
            }
            let bytes = s.to_bytes();
            let back = EmbeddingStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for i in 0..n {
                for k in 0..h {
                    let a: Vec<u32> = s.head_view(i, k).iter().map(|v| v.to_bits()).collect();
                    let b: Vec<u32> = back.head_view(i, k).iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
