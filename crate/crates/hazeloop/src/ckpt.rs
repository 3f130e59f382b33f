//! Binary containers for named tensors and instruction embeddings.
//!
//! Checkpoint layout: magic `LLCKPT1\0`, a `u32` tensor count, then for each
//! tensor a `u32`-length-prefixed UTF-8 name, a `u32` rank, the shape as
//! `u32`s and the row-major payload as `f32`. All integers and floats are
//! little-endian.
//!
//! Embedding layout: magic `LLEMB1\0`, then entries until end of file, each a
//! `u32`-length-prefixed UTF-8 instruction, a `u32` dimension and the vector
//! as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use hazeloop_core::igm::EmbeddingTable;
use hazeloop_core::losses::{Activation, ExtractorLevel, PerceptualExtractor};
use hazeloop_core::param::ParamStore;
use hazeloop_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LLCKPT1\0";
pub const EMBEDDING_MAGIC: &[u8; 7] = b"LLEMB1\0";

const MAX_RANK: u32 = 8;

pub fn encode_checkpoint<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_str(&mut out, name);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Cursor::new(bytes, path);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n.min(4096) as usize);
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(r.err(format!("tensor {name:?} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("shape overflow"))?;
        let data = r.f32s(len)?;
        let t = Tensor::from_vec(&shape, data).map_err(|e| r.err(e.to_string()))?;
        out.push((name, t));
    }
    if !r.at_end() {
        return Err(r.err("trailing bytes after the last tensor"));
    }
    Ok(out)
}

pub fn write_checkpoint<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    write_bytes(path, &encode_checkpoint(entries))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&read_bytes(path)?, path)
}

/// Saves every parameter whose name starts with one of `prefixes`.
pub fn save_store(path: &Path, store: &ParamStore, prefixes: &[&str]) -> Result<()> {
    write_checkpoint(path, store.iter().filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p))))
}

/// Loads a checkpoint into `store`; returns the names that were loaded.
pub fn load_store(path: &Path, store: &mut ParamStore) -> Result<Vec<String>> {
    let entries = read_checkpoint(path)?;
    store
        .load(entries.iter().map(|(n, t)| (n.as_str(), t)))
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(entries.into_iter().map(|(n, _)| n).collect())
}

pub fn encode_embeddings(table: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    for (text, v) in table.entries() {
        put_str(&mut out, text);
        put_u32(&mut out, v.len() as u32);
        for &x in v {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<EmbeddingTable> {
    let mut r = Cursor::new(bytes, path);
    r.expect_magic(EMBEDDING_MAGIC)?;
    let mut table: Option<EmbeddingTable> = None;
    while !r.at_end() {
        let text = r.string()?;
        let dim = r.u32()? as usize;
        let v = r.f32s(dim)?;
        let t = table.get_or_insert_with(|| EmbeddingTable::new(dim));
        t.insert(&text, v).map_err(|e| r.err(e.to_string()))?;
    }
    table.ok_or_else(|| Error::format(path, "embedding file has no entries"))
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    write_bytes(path, &encode_embeddings(table))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    decode_embeddings(&read_bytes(path)?, path)
}

/// Stores an extractor as `level{i}.weight`, `level{i}.bias`,
/// `level{i}.stride`, `level_weights` and `activation` (0 linear, 1 GELU).
pub fn write_extractor(path: &Path, ex: &PerceptualExtractor) -> Result<()> {
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    for (i, l) in ex.levels().iter().enumerate() {
        owned.push((format!("level{i}.weight"), l.weight.clone()));
        owned.push((format!("level{i}.bias"), l.bias.clone()));
        owned.push((format!("level{i}.stride"), Tensor::scalar(l.stride as f64)));
    }
    let lw = ex.level_weights().to_vec();
    owned.push(("level_weights".into(), Tensor::from_vec(&[lw.len()], lw)?));
    let act = match ex.activation() {
        Activation::Linear => 0.0,
        Activation::Gelu => 1.0,
    };
    owned.push(("activation".into(), Tensor::scalar(act)));
    write_checkpoint(path, owned.iter().map(|(n, t)| (n.as_str(), t)))
}

pub fn read_extractor(path: &Path) -> Result<PerceptualExtractor> {
    let entries = read_checkpoint(path)?;
    let get = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::format(path, format!("missing tensor {name:?}")))
    };
    let weights = get("level_weights")?.into_data();
    let mut levels = Vec::with_capacity(weights.len());
    for i in 0..weights.len() {
        let stride = get(&format!("level{i}.stride"))?.item();
        levels.push(ExtractorLevel {
            weight: get(&format!("level{i}.weight"))?,
            bias: get(&format!("level{i}.bias"))?,
            stride: stride as usize,
        });
    }
    let activation = if get("activation")?.item() == 0.0 {
        Activation::Linear
    } else {
        Activation::Gelu
    };
    PerceptualExtractor::new(levels, weights, activation).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, format!("{} (at byte {})", msg.into(), self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len()).ok() != Some(magic) {
            return Err(Error::format(self.path, "bad magic bytes"));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("name is not valid UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let a = Tensor::from_vec(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.0]).unwrap();
        let b = Tensor::scalar(2.0);
        let bytes = encode_checkpoint([("a", &a), ("x.b", &b)]);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert!(back[0].1.max_abs_diff(&a) < 1e-6);
        assert_eq!(back[1].1.item(), 2.0);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let a = Tensor::zeros(&[4]);
        let bytes = encode_checkpoint([("a", &a)]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        assert!(decode_checkpoint(b"LLCKPT2\0", Path::new("mem")).is_err());
    }

    #[test]
    fn embedding_round_trip() {
        let mut t = EmbeddingTable::new(3);
        t.insert("segment the scene", vec![1.0, 0.0, 0.0]).unwrap();
        t.insert("estimate depth", vec![0.0, 0.6, 0.8]).unwrap();
        let back = decode_embeddings(&encode_embeddings(&t), Path::new("mem")).unwrap();
        assert_eq!(back.len(), 2);
        let v: Vec<_> = back.entries().map(|(k, v)| (k.to_string(), v.to_vec())).collect();
        assert_eq!(v[1].0, "estimate depth");
        assert!((v[1].1[2] - 0.8).abs() < 1e-6);
    }
}
