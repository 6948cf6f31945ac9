//! Named parameter storage and the on-disk tensor container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ICALTNSR"
//! version  u32      1
//! dtype    u8       4 = f32, 8 = f64
//! meta     u32 len + UTF-8 bytes (free-form, JSON by convention)
//! count    u32
//! entries  count x { name: u32 len + UTF-8, ndim: u32, dims: u64 x ndim, data: raw LE scalars }
//! ```

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::scalar::DType;
use super::{Scalar, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"ICALTNSR";
pub const VERSION: u32 = 1;

/// Ordered map from dotted parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Scalar count of entries whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.map.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn to_bytes(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.map.len() as u32).to_le_bytes());
        for (name, t) in &self.map {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parse a container; returns the metadata string and the entries.
    pub fn from_bytes(bytes: &[u8]) -> Result<(String, Self), TensorError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TensorError::Format(format!("unsupported container version {version}")));
        }
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| TensorError::Format(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(TensorError::Format(format!("container holds {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| TensorError::Format("metadata is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut params = Params::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| TensorError::Format("entry name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.size())?;
            let data = raw.chunks(dtype.size()).map(T::read_le).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok((meta, params))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<(), TensorError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(meta))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(String, Self), TensorError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Element type of a container on disk, from its header alone.
    pub fn peek_dtype(path: &Path) -> Result<DType, TensorError> {
        let mut head = [0u8; 13];
        std::io::Read::read_exact(&mut std::fs::File::open(path)?, &mut head)
            .map_err(|_| TensorError::Format("truncated header".into()))?;
        if head[..8] != MAGIC[..] {
            return Err(TensorError::Format("bad magic".into()));
        }
        DType::from_tag(head[12]).ok_or_else(|| TensorError::Format(format!("unknown dtype tag {}", head[12])))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_roundtrip_is_bit_exact(
            vals in proptest::collection::vec(-1e30f32..1e30, 1..40),
            meta in "[a-z{}\":,0-9]{0,20}",
        ) {
            let mut p = Params::<f32>::new();
            p.insert("a.weight", Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            p.insert("b", Tensor::scalar(1.5f32));
            let bytes = p.to_bytes(&meta);
            let (m, q) = Params::<f32>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&m, &meta);
            let got: Vec<u32> = q.get("a.weight").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(q.to_bytes(&m), bytes);
        }
    }

    #[test]
    fn rejects_wrong_dtype_and_truncation() {
        let mut p = Params::<f64>::new();
        p.insert("x", Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let bytes = p.to_bytes("");
        assert!(matches!(Params::<f32>::from_bytes(&bytes), Err(TensorError::Format(_))));
        assert!(Params::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
