//! Named-tensor container used for model checkpoints and extractor weights.
//!
//! Layout (little-endian): `b"SVCK"`, `u32` version (1), `u32` metadata length,
//! metadata as UTF-8 JSON, `u32` tensor count, then per tensor: `u32` name
//! length, name bytes, `u32` rank, `u32` dims, `f32` values in row-major order.

use crate::error::{Error, Result};
use crate::nn::{Module, Real, Tensor};
use crate::tomo_sim::container::write_atomic;
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SVCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorFile> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "missing SVCK header"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format(path, e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::format(path, e.to_string()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(TensorFile { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<TensorFile> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorFile::decode(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Snapshot of a module's parameters and buffers.
    pub fn from_module<T: Real, M: Module<T>>(module: &M, metadata: serde_json::Value) -> TensorFile {
        let mut tensors: Vec<NamedTensor> = module
            .params()
            .into_iter()
            .map(|p| named(&p.name, &p.value))
            .collect();
        tensors.extend(module.buffers().into_iter().map(|(n, t)| named(&n, t)));
        TensorFile { metadata, tensors }
    }

    /// Loads every parameter and buffer of `module` by name, checking shapes.
    pub fn load_into<T: Real, M: Module<T>>(&self, module: &mut M, path: &Path) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let fill = |name: &str, dst: &mut Tensor<T>| -> Result<()> {
            let src = by_name
                .get(name)
                .ok_or_else(|| Error::format(path, format!("tensor {name} missing")))?;
            if src.data.len() != dst.len() || src.dims.iter().product::<usize>() != dst.len() {
                return Err(Error::format(
                    path,
                    format!("tensor {name} has dims {:?}, model expects {:?}", src.dims, dst.shape()),
                ));
            }
            for (d, &s) in dst.data_mut().iter_mut().zip(&src.data) {
                *d = T::lit(s as f64);
            }
            Ok(())
        };
        for p in module.params_mut() {
            let name = p.name.clone();
            fill(&name, &mut p.value)?;
        }
        for (name, buf) in module.buffers_mut() {
            fill(&name, buf)?;
        }
        Ok(())
    }
}

fn named<T: Real>(name: &str, t: &Tensor<T>) -> NamedTensor {
    let dims: Vec<usize> = t.shape().to_vec();
    NamedTensor {
        name: name.to_string(),
        dims,
        data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            dims in proptest::collection::vec(1usize..4, 1..4),
            name in "[a-z0-9._]{1,12}",
            epoch in 0u32..100,
        ) {
            let n: usize = dims.iter().product();
            let file = TensorFile {
                metadata: serde_json::json!({"arch": "generator", "epoch": epoch}),
                tensors: vec![NamedTensor { name, dims, data: (0..n).map(|i| i as f32 * 0.25 - 1.0).collect() }],
            };
            let back = TensorFile::decode(&file.encode(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, file);
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let file = TensorFile {
            metadata: serde_json::json!({}),
            tensors: vec![NamedTensor {
                name: "w".into(),
                dims: vec![2],
                data: vec![1.0, 2.0],
            }],
        };
        let mut bytes = file.encode();
        bytes.truncate(bytes.len() - 1);
        assert!(TensorFile::decode(&bytes, Path::new("x")).is_err());
    }
}
