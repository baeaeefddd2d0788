//! NTF1 named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NTF1" | u32 count | count x ( u16 name_len | name (UTF-8) | u8 dtype | u8 rank
//!                               | rank x u32 extent | row-major payload )
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"NTF1";

#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl Stored {
    pub fn dtype(&self) -> DType {
        match self {
            Stored::F32(_) => DType::F32,
            Stored::F64(_) => DType::F64,
            Stored::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
            Stored::U8(t) => t.shape(),
        }
    }

    /// Converts floating payloads to `T`; u8 payloads are rejected.
    pub fn to_float<T: Scalar>(&self) -> Result<Tensor<T>> {
        match self {
            Stored::F32(t) => Ok(t.cast()),
            Stored::F64(t) => Ok(t.cast()),
            Stored::U8(_) => Err(Error::format("expected a floating point tensor, found u8")),
        }
    }

    pub fn from_float<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F64 => Stored::F64(t.cast()),
            _ => Stored::F32(t.cast()),
        }
    }
}

/// Ordered collection of named tensors, the in-memory form of an NTF1 file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    entries: Vec<(String, Stored)>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Stored)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Stored) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn insert_float<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.insert(name, Stored::from_float(t));
    }

    pub fn remove(&mut self, name: &str) -> Option<Stored> {
        let i = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(i).1)
    }

    pub fn get(&self, name: &str) -> Option<&Stored> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Stored> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("missing tensor `{name}`")))
    }

    pub fn float<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.require(name)?.to_float()
    }

    /// Stores a JSON document as a rank-1 u8 tensor.
    pub fn insert_json(&mut self, name: impl Into<String>, value: &serde_json::Value) {
        let bytes = serde_json::to_vec(value).expect("json serialisation");
        let n = bytes.len().max(1);
        let bytes = if bytes.is_empty() { vec![b' '] } else { bytes };
        self.insert(name, Stored::U8(Tensor::new(vec![n], bytes).expect("json shape")));
    }

    pub fn json(&self, name: &str) -> Result<serde_json::Value> {
        match self.require(name)? {
            Stored::U8(t) => Ok(serde_json::from_slice(t.data())?),
            _ => Err(Error::format(format!("`{name}` is not a u8 record"))),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> NamedTensors {
        NamedTensors {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &NamedTensors) {
        for (n, t) in &other.entries {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let name_bytes = name.as_bytes();
            let name_len =
                u16::try_from(name_bytes.len()).map_err(|_| Error::format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(t.dtype().code());
            let rank =
                u8::try_from(t.shape().len()).map_err(|_| Error::format(format!("rank too large for `{name}`")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::format(format!("extent too large for `{name}`")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match t {
                Stored::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Stored::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Stored::U8(t) => out.extend_from_slice(t.data()),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad magic: not an NTF1 file"));
        }
        let count = r.u32()? as usize;
        let mut out = NamedTensors::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("tensor name is not UTF-8"))?
                .to_string();
            let dtype = DType::from_code(r.u8()?)?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = numel(&shape);
            let payload = r.take(
                n.checked_mul(dtype.size())
                    .ok_or_else(|| Error::format("payload overflow"))?,
            )?;
            let t = match dtype {
                DType::F32 => Stored::F32(Tensor::new(
                    shape,
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )?),
                DType::F64 => Stored::F64(Tensor::new(
                    shape,
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )?),
                DType::U8 => Stored::U8(Tensor::new(shape, payload.to_vec())?),
            };
            if out.get(&name).is_some() {
                return Err(Error::format(format!("duplicate tensor name `{name}`")));
            }
            out.entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after last tensor"));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "truncated file: wanted {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let mut nt = NamedTensors::new();
        nt.insert("a", Stored::U8(Tensor::new(vec![2], vec![7, 9]).unwrap()));
        let bytes = nt.to_bytes().unwrap();
        assert_eq!(
            bytes,
            [b'N', b'T', b'F', b'1', 1, 0, 0, 0, 1, 0, b'a', 2, 1, 2, 0, 0, 0, 7, 9]
        );
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut nt = NamedTensors::new();
        nt.insert_float("w", &Tensor::<f32>::full(vec![3, 3], 1.5));
        let mut bytes = nt.to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 1];
        assert!(NamedTensors::from_bytes(truncated)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        bytes[0] = b'X';
        assert!(NamedTensors::from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn json_record_round_trip() {
        let mut nt = NamedTensors::new();
        let v = serde_json::json!({"version": 1, "variant": "psp"});
        nt.insert_json("meta", &v);
        let back = NamedTensors::from_bytes(&nt.to_bytes().unwrap()).unwrap();
        assert_eq!(back.json("meta").unwrap(), v);
    }

    proptest! {
        #[test]
        fn round_trip_preserves_bits(
            shape in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut x = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(x >> 2)
            }).collect();
            let mut nt = NamedTensors::new();
            nt.insert("t/x", Stored::F64(Tensor::new(shape.clone(), data.clone()).unwrap()));
            nt.insert("s", Stored::F32(Tensor::new(shape, data.iter().map(|&v| v as f32).collect()).unwrap()));
            let back = NamedTensors::from_bytes(&nt.to_bytes().unwrap()).unwrap();
            let bits = |s: &Stored| match s {
                Stored::F64(t) => t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                Stored::F32(t) => t.data().iter().map(|v| v.to_bits() as u64).collect(),
                Stored::U8(t) => t.data().iter().map(|&v| v as u64).collect(),
            };
            for ((n1, a), (n2, b)) in nt.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(a.shape(), b.shape());
                prop_assert_eq!(bits(a), bits(b));
            }
        }
    }
}
