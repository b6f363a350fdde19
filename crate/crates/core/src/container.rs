//! The `MVCT` binary tensor container used for dataset frames and model
//! checkpoints.
//!
//! Layout (all integers little-endian):
//! magic `MVCT` | version u32 | entry count u32, then per entry:
//! name length u16 | name bytes | dtype u8 (0=f64, 1=f32, 2=u8) | ndim u8 |
//! dims u32 each | raw row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MVCT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
            DType::U8 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            2 => Ok(DType::U8),
            other => Err(Error::Data(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> DType {
        match self {
            Payload::F64(_) => DType::F64,
            Payload::F32(_) => DType::F32,
            Payload::U8(_) => DType::U8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    /// Values widened to f64 regardless of stored dtype.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = match &self.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(self.dims.clone(), data).expect("entry dims validated on insert")
    }
}

/// An ordered set of named tensors; write-then-read is the identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .map(Entry::to_tensor)
            .ok_or_else(|| Error::Data(format!("container has no entry named '{name}'")))
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, payload: Payload) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Data(format!("entry name too long ({})", name.len())));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Data(format!("duplicate entry name '{name}'")));
        }
        let numel: usize = dims.iter().product();
        if numel != payload.len() {
            return Err(Error::Data(format!(
                "entry '{}': dims {:?} imply {} values, payload has {}",
                name,
                dims,
                numel,
                payload.len()
            )));
        }
        self.entries.push(Entry { name, dims, payload });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(name, t.shape().to_vec(), Payload::F64(t.data().to_vec()))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for entry in &self.entries {
            w.write_all(&(entry.name.len() as u16).to_le_bytes())?;
            w.write_all(entry.name.as_bytes())?;
            w.write_all(&[entry.payload.dtype().code(), entry.dims.len() as u8])?;
            for &d in &entry.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            match &entry.payload {
                Payload::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                Payload::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                Payload::U8(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let read_err = |what: &str| Error::Data(format!("truncated container while reading {what}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| read_err("magic"))?;
        if magic != MAGIC {
            return Err(Error::Data(format!("bad magic {magic:?}, not an MVCT container")));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(|_| read_err("version"))?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported container version {version} (expected {FORMAT_VERSION})"
            )));
        }
        r.read_exact(&mut buf4).map_err(|_| read_err("entry count"))?;
        let count = u32::from_le_bytes(buf4) as usize;
        let mut container = Container::new();
        for i in 0..count {
            let mut buf2 = [0u8; 2];
            r.read_exact(&mut buf2).map_err(|_| read_err("name length"))?;
            let name_len = u16::from_le_bytes(buf2) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| read_err("name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data(format!("entry {i} name is not UTF-8")))?;
            let mut head = [0u8; 2];
            r.read_exact(&mut head).map_err(|_| read_err("dtype"))?;
            let dtype = DType::from_code(head[0])?;
            let ndim = head[1] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut buf4).map_err(|_| read_err("dims"))?;
                dims.push(u32::from_le_bytes(buf4) as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = match dtype {
                DType::F64 => {
                    let mut bytes = vec![0u8; numel * 8];
                    r.read_exact(&mut bytes).map_err(|_| read_err("payload"))?;
                    Payload::F64(
                        bytes
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DType::F32 => {
                    let mut bytes = vec![0u8; numel * 4];
                    r.read_exact(&mut bytes).map_err(|_| read_err("payload"))?;
                    Payload::F32(
                        bytes
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DType::U8 => {
                    let mut bytes = vec![0u8; numel];
                    r.read_exact(&mut bytes).map_err(|_| read_err("payload"))?;
                    Payload::U8(bytes)
                }
            };
            container.push(name, dims, payload)?;
        }
        Ok(container)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Container::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push("alpha", vec![2, 3], Payload::F64(vec![1.0, -2.5, 3.0, 0.0, 1e-12, 7.25]))
            .unwrap();
        c.push("beta", vec![4], Payload::F32(vec![0.5, -0.25, 1.0, 2.0])).unwrap();
        c.push("mask", vec![2, 2], Payload::U8(vec![0, 1, 1, 0])).unwrap();
        c
    }

    #[test]
    fn round_trip_is_identity() {
        let c = sample();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let back = Container::read_from(&bytes[..]).unwrap();
        assert_eq!(c, back);
        // and byte-stable on rewrite
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(Container::read_from(&corrupt[..]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 99;
        assert!(Container::read_from(&wrong_version[..]).is_err());
    }

    #[test]
    fn rejects_duplicate_names_and_bad_dims() {
        let mut c = Container::new();
        c.push("x", vec![1], Payload::F64(vec![1.0])).unwrap();
        assert!(c.push("x", vec![1], Payload::F64(vec![2.0])).is_err());
        assert!(c.push("y", vec![3], Payload::F64(vec![1.0])).is_err());
    }

    #[test]
    fn truncated_file_is_a_data_error() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        match Container::read_from(&bytes[..]) {
            Err(Error::Data(_)) => {}
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
