//! `TTPT1` tensor archive.
//!
//! Layout: magic `TTPT`, version byte `0x01`, then records until end of
//! input. Each record is a little-endian `u16` name length, the UTF-8 name,
//! a `u8` rank, `rank` little-endian `u32` dims, and the row-major payload
//! as little-endian `f32`. Text metadata is stored as a rank-1 record whose
//! payload holds one UTF-8 byte per float.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"TTPT";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    records: Vec<Record>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push_f32(&mut self, name: &str, dims: Vec<u32>, data: Vec<f32>) -> Result<()> {
        if name.len() > u16::MAX as usize {
            return Err(Error::Archive(format!("record name of {} bytes is too long", name.len())));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Archive(format!("rank {} exceeds 255", dims.len())));
        }
        if self.get(name).is_some() {
            return Err(Error::Archive(format!("duplicate record {name:?}")));
        }
        let record = Record { name: name.to_string(), dims, data };
        if record.element_count() != record.data.len() {
            return Err(Error::Shape(format!(
                "record {name:?}: dims {:?} need {} values, got {}",
                record.dims,
                record.element_count(),
                record.data.len()
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
        let dims = dims
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| Error::Archive(format!("dimension {d} exceeds u32"))))
            .collect::<Result<Vec<_>>>()?;
        let data = data
            .iter()
            .map(|&x| {
                let y = x as f32;
                if y.is_finite() {
                    Ok(y)
                } else {
                    Err(Error::Numeric(format!("record {name:?}: {x} is not representable as f32")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.push_f32(name, dims, data)
    }

    pub fn push_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.push(name, &[m.rows(), m.cols()], m.as_slice())
    }

    pub fn push_text(&mut self, name: &str, text: &str) -> Result<()> {
        let data = text.bytes().map(f32::from).collect::<Vec<_>>();
        self.push_f32(name, vec![data.len() as u32], data)
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| Error::Archive(format!("missing record {name:?}")))
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let r = self.require(name)?;
        if r.dims.len() != 1 {
            return Err(Error::Shape(format!("record {name:?} has rank {}, expected 1", r.dims.len())));
        }
        Ok(r.data.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let r = self.require(name)?;
        if r.dims.len() != 2 {
            return Err(Error::Shape(format!("record {name:?} has rank {}, expected 2", r.dims.len())));
        }
        Matrix::from_vec(
            r.dims[0] as usize,
            r.dims[1] as usize,
            r.data.iter().map(|&x| f64::from(x)).collect(),
        )
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let r = self.require(name)?;
        let bytes = r
            .data
            .iter()
            .map(|&x| {
                if x.fract() == 0.0 && (0.0..=255.0).contains(&x) {
                    Ok(x as u8)
                } else {
                    Err(Error::Archive(format!("record {name:?} is not a text record")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|_| Error::Archive(format!("record {name:?} is not valid UTF-8")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in &r.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = cur.take(1)?[0];
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version:#04x}")));
        }
        let mut archive = Archive::new();
        while cur.pos < bytes.len() {
            let name_len = u16::from_le_bytes(cur.array()?) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Archive("record name is not valid UTF-8".into()))?
                .to_string();
            let rank = cur.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| Ok(u32::from_le_bytes(cur.array()?))).collect::<Result<Vec<_>>>()?;
            let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let count = count.ok_or_else(|| Error::Archive(format!("record {name:?} is too large")))?;
            if count.saturating_mul(4) > bytes.len() - cur.pos {
                return Err(Error::Archive(format!("record {name:?} is truncated")));
            }
            let data = (0..count).map(|_| Ok(f32::from_le_bytes(cur.array()?))).collect::<Result<Vec<_>>>()?;
            archive.push_f32(&name, dims, data)?;
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Archive(format!("unexpected end of archive at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }
}
