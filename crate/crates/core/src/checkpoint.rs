//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "EPCK"
//! version    u32      currently 1
//! meta_len   u32      length of the JSON metadata that follows
//! meta       bytes    UTF-8 JSON object
//! count      u32      number of entries
//! entry*     name_len u16, name bytes (UTF-8),
//!            dtype u8 (0 = f32, 1 = f64, 2 = u32),
//!            ndim u8, dims u64 x ndim,
//!            data (product(dims) elements of dtype)
//! ```
//!
//! Model checkpoints carry `{"kind": "model", "precision": ..., "spec": ...}`
//! and one entry per parameter plus the running mean/variance of both
//! normalization states. Dataset dumps use `{"kind": "dataset", ...}` with
//! `images`, `labels` and `sample_ids` entries.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl EntryData {
    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U32(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::U32(_) => 2,
        }
    }

    /// Real-valued data converted to `T`.
    pub fn to_real<T: Real>(&self) -> Result<Vec<T>> {
        match self {
            EntryData::F32(v) => Ok(v.iter().map(|&x| T::of(x as f64)).collect()),
            EntryData::F64(v) => Ok(v.iter().map(|&x| T::of(x)).collect()),
            EntryData::U32(_) => Err(Error::Format("expected a real-valued entry".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn real<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::PRECISION {
            crate::real::Precision::F32 => EntryData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            crate::real::Precision::F64 => EntryData::F64(t.to_f64_vec()),
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.data.to_real()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub entries: Vec<Entry>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| fmt_err("container truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let expected: usize = e.shape.iter().product();
            if expected != e.data.len() || e.shape.len() > u8::MAX as usize {
                return Err(fmt_err(format!("entry {} has inconsistent shape", e.name)));
            }
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.data.tag());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt_err("not a checkpoint container (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| fmt_err("entry name is not UTF-8"))?
                .to_string();
            let tag = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| fmt_err("dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| fmt_err("entry size overflow"))?;
            let width = match tag {
                0 | 2 => 4,
                1 => 8,
                t => return Err(fmt_err(format!("unknown dtype tag {t}"))),
            };
            let bytes = r.take(n.checked_mul(width).ok_or_else(|| fmt_err("entry size overflow"))?)?;
            let data = match tag {
                0 => EntryData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => EntryData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => EntryData::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(fmt_err("trailing bytes after last entry"));
        }
        Ok(Self { meta, entries })
    }

    /// Writes atomically: a sibling temporary file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes the full model state.
pub fn model_to_container<T: Real>(model: &Model<T>) -> Result<Container> {
    let mut c = Container::new(json!({
        "kind": "model",
        "precision": T::PRECISION,
        "spec": model.spec(),
    }));
    for (name, t) in model.named_tensors() {
        c.push(Entry::real(name, &t));
    }
    Ok(c)
}

/// Rebuilds a model from a container, converting precision if needed.
pub fn model_from_container<T: Real>(c: &Container) -> Result<Model<T>> {
    if c.meta.get("kind").and_then(Value::as_str) != Some("model") {
        return Err(fmt_err("container does not hold a model"));
    }
    let spec: ModelSpec = serde_json::from_value(
        c.meta
            .get("spec")
            .cloned()
            .ok_or_else(|| fmt_err("model checkpoint without spec"))?,
    )?;
    let mut model = Model::build(&spec)?;
    let tensors: HashMap<String, Tensor<T>> = c
        .entries
        .iter()
        .map(|e| Ok((e.name.clone(), e.tensor()?)))
        .collect::<Result<_>>()?;
    model.load_named_tensors(&tensors)?;
    Ok(model)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    model_to_container(model)?.save(path)
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    model_from_container(&Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::norm::{Mode, Route};

    #[test]
    fn model_round_trip_is_bit_exact() {
        let spec = ModelSpec::small_cnn([1, 8, 8], 3, 9);
        let mut m = Model::<f32>::build(&spec).unwrap();
        let x = Tensor::<f32>::from_f64(&[4, 1, 8, 8], &(0..256).map(|i| (i % 17) as f64 / 17.0).collect::<Vec<_>>()).unwrap();
        // Move running statistics away from their defaults on both routes.
        m.predict(&x, Route::Main, Mode::Train).unwrap();
        m.predict(&x.map(|v| v * 0.5), Route::Aux, Mode::Train).unwrap();
        let bytes = model_to_container(&m).unwrap().to_bytes().unwrap();
        let back: Model<f32> = model_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(m.named_tensors(), back.named_tensors());
        assert_eq!(model_to_container(&back).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = Container::new(json!({})).to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        match Container::from_bytes(&bytes) {
            Err(Error::Version { found: 7, expected: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_and_bad_magic_rejected() {
        let mut c = Container::new(json!({"a": 1}));
        c.push(Entry {
            name: "x".into(),
            shape: vec![3],
            data: EntryData::U32(vec![1, 2, 3]),
        });
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Model::<f64>::build(&ModelSpec::mlp(4, &[5], 2, 1)).unwrap();
        save_model(&m, &path).unwrap();
        let back: Model<f64> = load_model(&path).unwrap();
        assert_eq!(m.named_tensors(), back.named_tensors());
        assert!(!dir.path().join("m.bin.tmp").exists());
    }
}
