//! `ICCW` parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ICCW" | version: u32 | record*
//! record = name_len: u32 | name: utf-8 | dtype: u8 | rank: u32 | extents: u64 * rank | values
//! ```
//!
//! dtype 0 is `f32`, 1 is `f64` and 2 is raw bytes (used for the embedded model
//! configuration). Records are written in name order, so writing a checkpoint
//! that was just read reproduces the input bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ICCW";
pub const VERSION: u32 = 1;
const BYTES_TAG: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: BTreeMap<String, Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &BTreeMap<String, Record> {
        &self.records
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let rec = match T::DTYPE {
            DType::F32 => Record::F32(t.cast()),
            DType::F64 => Record::F64(t.cast()),
        };
        self.records.insert(name.into(), rec);
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        self.records.insert(name.into(), Record::Bytes(text.as_bytes().to_vec()));
    }

    /// Tensor record converted to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        match self.records.get(name) {
            Some(Record::F32(t)) => Ok(t.cast()),
            Some(Record::F64(t)) => Ok(t.cast()),
            Some(Record::Bytes(_)) => Err(Error::Format(format!("record {name} is not a tensor"))),
            None => Err(Error::Format(format!("checkpoint has no record named {name}"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.records.get(name) {
            Some(Record::Bytes(b)) => {
                String::from_utf8(b.clone()).map_err(|_| Error::Format(format!("record {name} is not utf-8")))
            }
            _ => Err(Error::Format(format!("checkpoint has no text record named {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match rec {
                Record::F32(t) => write_tensor(&mut out, t),
                Record::F64(t) => write_tensor(&mut out, t),
                Record::Bytes(b) => {
                    out.push(BYTES_TAG);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing ICCW magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut records = BTreeMap::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("record name is not utf-8".into()))?
                .to_string();
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("record {name} is too large")))?;
            let rec = match (tag, DType::from_tag(tag)) {
                (BYTES_TAG, _) if rank == 1 => Record::Bytes(r.take(count)?.to_vec()),
                (_, Some(DType::F32)) => Record::F32(read_tensor(&mut r, shape, count)?),
                (_, Some(DType::F64)) => Record::F64(read_tensor(&mut r, shape, count)?),
                _ => return Err(Error::Format(format!("record {name} has unknown dtype tag {tag}"))),
            };
            if records.insert(name.clone(), rec).is_some() {
                return Err(Error::Format(format!("duplicate record {name}")));
            }
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader, shape: Vec<usize>, count: usize) -> Result<Tensor<T>> {
    let width = T::DTYPE.size();
    let raw = r.take(count.checked_mul(width).ok_or_else(|| Error::Format("record too large".into()))?)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
