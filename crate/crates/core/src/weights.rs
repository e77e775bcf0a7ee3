//! TIMW binary weight files.
//!
//! Layout, all integers little-endian: magic `TIMW`, version `u32` (= 1),
//! tensor count `u32`; then per tensor a `u16` name length, the UTF-8
//! name, a `u8` rank, `u32` dimensions, a `u8` dtype tag (0 = f32,
//! 1 = f64) and the row-major element bytes.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Real, Tensor};

pub const MAGIC: [u8; 4] = *b"TIMW";
pub const VERSION: u32 = 1;

/// A tensor as stored on disk. Values are widened to `f64`, which is exact
/// for both supported element types.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64(&self.shape, &self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub tensors: Vec<NamedTensor>,
}

/// Outcome of loading a file into a store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Store tensors the file did not provide; they keep their fresh values.
    pub fresh: Vec<String>,
    /// File tensors that were not requested or have no counterpart.
    pub ignored: Vec<String>,
}

impl WeightFile {
    /// Every tensor of `store` (parameters and buffers), in registration order.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    dtype: T::DTYPE,
                    values: p.tensor.to_f64(),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(malformed)?.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&u16::try_from(name.len()).map_err(malformed)?.to_le_bytes());
            out.extend_from_slice(name);
            out.push(u8::try_from(t.shape.len()).map_err(malformed)?);
            for &d in &t.shape {
                out.extend_from_slice(&u32::try_from(d).map_err(malformed)?.to_le_bytes());
            }
            out.push(t.dtype as u8);
            for &v in &t.values {
                match t.dtype {
                    DType::F32 => (v as f32).write_le(&mut out),
                    DType::F64 => v.write_le(&mut out),
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::MalformedWeights("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::MalformedWeights(format!("duplicate tensor `{name}`")));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::MalformedWeights(format!("unknown dtype tag {tag} for `{name}`")))?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)))
                .ok_or_else(|| Error::MalformedWeights(format!("tensor `{name}` is too large")))?;
            let raw = r.take(n.1, "tensor data")?;
            let values = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
            };
            tensors.push(NamedTensor {
                name,
                shape,
                dtype,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::MalformedWeights(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies the file tensors whose names satisfy `select` into `store`.
    ///
    /// With `strict`, every store tensor must be provided by the file.
    /// Shape disagreements are always errors.
    pub fn apply<T: Real>(&self, store: &mut ParamStore<T>, select: impl Fn(&str) -> bool, strict: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        for t in &self.tensors {
            if !select(&t.name) || store.id(&t.name).is_none() {
                report.ignored.push(t.name.clone());
                continue;
            }
            store.assign(&t.name, &t.to_tensor::<T>().map_err(|_| Error::ShapeConflict {
                name: t.name.clone(),
                file: t.shape.clone(),
                model: store.by_name(&t.name).map(|x| x.shape().to_vec()).unwrap_or_default(),
            })?)?;
            report.loaded.push(t.name.clone());
        }
        let loaded: HashSet<&str> = report.loaded.iter().map(String::as_str).collect();
        report.fresh = store
            .iter()
            .filter(|p| !loaded.contains(p.name.as_str()))
            .map(|p| p.name.clone())
            .collect();
        if strict {
            if let Some(name) = report.fresh.first() {
                return Err(Error::MissingTensor(name.clone()));
            }
        }
        Ok(report)
    }
}

pub fn save_weights<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    WeightFile::from_store(store).save(path)
}

fn malformed<E: std::fmt::Display>(e: E) -> Error {
    Error::MalformedWeights(e.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
