//! On-disk stores: the sentence-embedding cache and the named-tensor checkpoint container.
//!
//! Both share one header layout: 8-byte magic, then little-endian `u32` version, count,
//! dim and dtype tag.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::error::{ensure, Error, Result};
use crate::numerics::{Module, Tensor};

pub const CACHE_MAGIC: &[u8; 8] = b"L2CEMB\0\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"L2CCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_F64: u32 = 2;
const INDEX_ENTRY_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub count: u32,
    pub dim: u32,
    pub dtype: u32,
}

fn write_header(w: &mut impl Write, magic: &[u8; 8], h: Header) -> Result<()> {
    w.write_all(magic)?;
    for v in [h.version, h.count, h.dim, h.dtype] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_header(bytes: &[u8], magic: &[u8; 8], what: &str) -> Result<Header> {
    ensure!(bytes.len() >= HEADER_LEN, Data, "{what} file is truncated");
    ensure!(&bytes[..8] == magic, Data, "{what} file has a bad magic");
    let u = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let h = Header {
        version: u(0),
        count: u(1),
        dim: u(2),
        dtype: u(3),
    };
    ensure!(
        h.version == FORMAT_VERSION,
        Data,
        "unsupported {what} version {}",
        h.version
    );
    Ok(h)
}

/// Sentence embeddings keyed by caption id, stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    data: Vec<f32>,
}

impl EmbeddingCache {
    /// Builds a cache from `(caption_id, embedding)` rows; values are rounded to 32 bits.
    pub fn from_rows(dim: usize, ids: Vec<u64>, values: &Tensor) -> Result<Self> {
        ensure!(
            values.len() == ids.len() * dim,
            Dimension,
            "{} ids but {} values at dim {dim}",
            ids.len(),
            values.len()
        );
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            ensure!(
                index.insert(id, i).is_none(),
                Data,
                "duplicate caption_id {id}"
            );
        }
        let data = values.data().iter().map(|&v| v as f32).collect();
        Ok(Self {
            dim,
            ids,
            index,
            data,
        })
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

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn lookup(&self, caption_id: u64) -> Result<&[f32]> {
        let &i = self
            .index
            .get(&caption_id)
            .ok_or_else(|| Error::NotFound(format!("caption_id {caption_id}")))?;
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Stacks the cached vectors of `ids` into a 64-bit `[n × dim]` tensor.
    pub fn gather(&self, ids: &[u64]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            out.extend(self.lookup(id)?.iter().map(|&v| v as f64));
        }
        Tensor::new(vec![ids.len(), self.dim], out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.ids.len();
        let mut buf = Vec::with_capacity(HEADER_LEN + n * (INDEX_ENTRY_LEN + 4 * self.dim));
        let h = Header {
            version: FORMAT_VERSION,
            count: n as u32,
            dim: self.dim as u32,
            dtype: DTYPE_F32,
        };
        write_header(&mut buf, CACHE_MAGIC, h).expect("writing to a Vec cannot fail");
        let payload_start = HEADER_LEN + n * INDEX_ENTRY_LEN;
        for (i, id) in self.ids.iter().enumerate() {
            buf.extend_from_slice(&id.to_le_bytes());
            buf.extend_from_slice(&((payload_start + i * 4 * self.dim) as u64).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let h = read_header(bytes, CACHE_MAGIC, "cache")?;
        ensure!(
            h.dtype == DTYPE_F32,
            Data,
            "cache dtype tag {} is not f32",
            h.dtype
        );
        let (n, dim) = (h.count as usize, h.dim as usize);
        let need = HEADER_LEN + n * (INDEX_ENTRY_LEN + 4 * dim);
        ensure!(
            bytes.len() == need,
            Data,
            "cache file holds {} bytes, header implies {need}",
            bytes.len()
        );
        let mut ids = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            let e =
                &bytes[HEADER_LEN + i * INDEX_ENTRY_LEN..HEADER_LEN + (i + 1) * INDEX_ENTRY_LEN];
            let id = u64::from_le_bytes(e[..8].try_into().unwrap());
            let off = u64::from_le_bytes(e[8..].try_into().unwrap()) as usize;
            ensure!(
                off + 4 * dim <= bytes.len(),
                Data,
                "cache record {id} points past the end of the file"
            );
            ids.push(id);
            data.extend(
                bytes[off..off + 4 * dim]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
        }
        let mut index = HashMap::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            ensure!(
                index.insert(id, i).is_none(),
                Data,
                "duplicate caption_id {id} in cache"
            );
        }
        Ok(Self {
            dim,
            ids,
            index,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read cache {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads only the header of a cache file.
pub fn inspect_cache(path: &Path) -> Result<Header> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read cache {}: {e}", path.display())))?;
    read_header(&bytes, CACHE_MAGIC, "cache")
}

/// Result of a cache build, with the number of sequences pushed through the encoder.
pub struct CacheBuild {
    pub cache: EmbeddingCache,
    pub forwards: usize,
}

/// Embeds every caption of `corpus` once, in manifest order.
///
/// `embed` maps a slice of captions (content tokens) to their `[n × dim]` embeddings.
pub fn build_cache(
    corpus: &Corpus,
    dim: usize,
    chunk: usize,
    mut embed: impl FnMut(&[&[u32]]) -> Result<Tensor>,
) -> Result<CacheBuild> {
    let caps: Vec<_> = corpus
        .manifest
        .records
        .iter()
        .flat_map(|r| r.captions.iter())
        .collect();
    let ids: Vec<u64> = caps.iter().map(|c| c.caption_id).collect();
    let mut values = Vec::with_capacity(caps.len() * dim);
    let mut forwards = 0;
    for part in caps.chunks(chunk.max(1)) {
        let toks: Vec<&[u32]> = part.iter().map(|c| c.tokens.as_slice()).collect();
        let e = embed(&toks)?;
        ensure!(
            e.shape() == [part.len(), dim],
            Dimension,
            "embedder returned shape {:?}",
            e.shape()
        );
        forwards += part.len();
        values.extend_from_slice(e.data());
    }
    let values = Tensor::new(vec![ids.len(), dim], values)?;
    let cache = EmbeddingCache::from_rows(dim, ids, &values)?;
    Ok(CacheBuild { cache, forwards })
}

/// Named tensors in the shared container layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_module(m: &dyn Module) -> Self {
        let mut c = Self::default();
        c.extend(m);
        c
    }

    pub fn extend(&mut self, m: &dyn Module) {
        for p in m.params() {
            self.tensors.insert(p.name.clone(), p.value.clone());
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("tensor {name} in checkpoint")))
    }

    /// Overwrites every parameter of `m` with the tensor of the same name.
    pub fn load_into(&self, m: &mut dyn Module) -> Result<()> {
        for p in m.params_mut() {
            let t = self.get(&p.name)?;
            ensure!(
                t.shape() == p.value.shape(),
                Data,
                "checkpoint tensor {} has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            );
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let h = Header {
            version: FORMAT_VERSION,
            count: self.tensors.len() as u32,
            dim: 0,
            dtype: DTYPE_F64,
        };
        write_header(&mut buf, CHECKPOINT_MAGIC, h).expect("writing to a Vec cannot fail");
        let table_len: usize = self
            .tensors
            .iter()
            .map(|(n, t)| 4 + n.len() + 4 + 8 * t.shape().len() + 8)
            .sum();
        let mut offset = HEADER_LEN + table_len;
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&(offset as u64).to_le_bytes());
            offset += 8 * t.len();
        }
        for t in self.tensors.values() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let h = read_header(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
        ensure!(
            h.dtype == DTYPE_F64,
            Data,
            "checkpoint dtype tag {} is not f64",
            h.dtype
        );
        let mut pos = HEADER_LEN;
        let mut take = |n: usize| -> Result<&[u8]> {
            ensure!(
                pos + n <= bytes.len(),
                Data,
                "checkpoint section table is truncated"
            );
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        let mut entries = Vec::with_capacity(h.count as usize);
        for _ in 0..h.count {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
            let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let off = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            entries.push((name, shape, off));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape, off) in entries {
            let n: usize = shape.iter().product();
            ensure!(
                off + 8 * n <= bytes.len(),
                Data,
                "tensor {name} points past the end of the file"
            );
            let data = bytes[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingCache {
        let v = Tensor::new(vec![3, 2], vec![0.1, 0.2, 1.0 / 3.0, -4.0, 5.5, 6.25]).unwrap();
        EmbeddingCache::from_rows(2, vec![10, 11, 40], &v).unwrap()
    }

    #[test]
    fn cache_round_trip_and_lookup() {
        let c = sample();
        let back = EmbeddingCache::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.lookup(11).unwrap(), &[(1.0f64 / 3.0) as f32, -4.0]);
        assert!(matches!(back.lookup(12), Err(Error::NotFound(_))));
        assert_eq!(&c.to_bytes()[..8], CACHE_MAGIC);
    }

    #[test]
    fn empty_cache_is_valid() {
        let c = EmbeddingCache::from_rows(4, vec![], &Tensor::zeros(&[0])).unwrap();
        let back = EmbeddingCache::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let v = Tensor::zeros(&[2, 1]);
        assert!(matches!(
            EmbeddingCache::from_rows(1, vec![5, 5], &v),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn corrupt_cache_rejected() {
        let mut b = sample().to_bytes();
        b.pop();
        assert!(EmbeddingCache::from_bytes(&b).is_err());
        b[0] = b'X';
        assert!(EmbeddingCache::from_bytes(&b).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut c = Checkpoint::default();
        c.insert(
            "a.w",
            Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, f64::MIN_POSITIVE]).unwrap(),
        );
        c.insert("b", Tensor::scalar(-0.5));
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(back.get("zzz").is_err());
    }
}
