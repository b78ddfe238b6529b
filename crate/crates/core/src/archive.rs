//! `TBK1` tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TBK1" | u64 entry count | entry*
//! entry := u32 name length | UTF-8 name | u8 dtype tag | u32 rank
//!          | rank x u64 extents | row-major payload
//! ```
//!
//! dtype tags: 0 = f64, 1 = f32, 2 = i8.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TBK1";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F64(_) => DType::F64,
            Payload::F32(_) => DType::F32,
            Payload::I8(_) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    /// Bytes this entry occupies on disk.
    pub fn encoded_len(&self) -> usize {
        4 + self.name.len() + 1 + 4 + 8 * self.shape.len() + self.payload.len() * self.payload.dtype().size()
    }

    pub fn to_f64(&self) -> Result<Tensor<f64>> {
        let data = match &self.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::I8(_) => {
                return Err(Error::Format(format!(
                    "entry `{}` holds int8 data; dequantize it instead",
                    self.name
                )))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::Format(format!("duplicate entry `{}`", entry.name)));
        }
        if entry.shape.iter().product::<usize>() != entry.payload.len() {
            return Err(Error::shape("archive entry", &entry.shape, &[entry.payload.len()]));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_tensor<F: Scalar>(&mut self, name: &str, t: &Tensor<F>) -> Result<()> {
        let payload = match F::DTYPE {
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::I8 => unreachable!("floating tensors only"),
        };
        self.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            payload,
        })
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f64>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))?
            .to_f64()
    }

    pub fn encoded_len(&self) -> usize {
        4 + 8 + self.entries.iter().map(Entry::encoded_len).sum::<usize>()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        let mut buf = Vec::new();
        for e in &self.entries {
            buf.clear();
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.push(e.payload.dtype() as u8);
            buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F64(v) => v.iter().for_each(|x| x.le_bytes(&mut buf)),
                Payload::F32(v) => v.iter().for_each(|x| x.le_bytes(&mut buf)),
                Payload::I8(v) => buf.extend(v.iter().map(|&x| x as u8)),
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("missing TBK1 magic".into()));
        }
        let count = cur.u64()? as usize;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let tag = cur.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag} in `{name}`")))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * dtype.size())?;
            let payload = match dtype {
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(f64::from_le).collect()),
                DType::F32 => Payload::F32(raw.chunks_exact(4).map(f32::from_le).collect()),
                DType::I8 => Payload::I8(raw.iter().map(|&b| b as i8).collect()),
            };
            archive.push(Entry { name, shape, payload })?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - cur.pos
            )));
        }
        Ok(archive)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated archive".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let mut a = Archive::new();
        a.push_tensor("w", &Tensor::<f32>::new([2], vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = a.to_bytes();
        let mut expected = b"TBK1".to_vec();
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), a.encoded_len());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::from_bytes(b"NOPE").is_err());
        let mut a = Archive::new();
        a.push_tensor("x", &Tensor::<f64>::zeros([3])).unwrap();
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(a.push_tensor("x", &Tensor::<f64>::zeros([1])).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 1..40),
                     ints in proptest::collection::vec(any::<i8>(), 1..20)) {
            let mut a = Archive::new();
            let n = values.len();
            a.push_tensor("layers.0.w", &Tensor::new([n], values.clone()).unwrap()).unwrap();
            a.push(Entry { name: "q".into(), shape: vec![ints.len()], payload: Payload::I8(ints) }).unwrap();
            let back = Archive::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
