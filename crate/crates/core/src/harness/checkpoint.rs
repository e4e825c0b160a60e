//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TLEG" | u32 version | u64 config_len | config (UTF-8) | u32 count
//! count × ( u16 name_len | name | u8 rank | rank × u64 dim | f32 data... )
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TLEG";
pub const VERSION: u32 = 1;

/// Bytes before the first tensor record, excluding the config text.
pub const HEADER_FIXED: usize = 4 + 4 + 8 + 4;

/// Config text plus an ordered table of named `f32` tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self {
            config: config.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Checkpoint::get`] but a missing name is a data error.
    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no tensor '{name}'")))
    }

    /// Total stored `f32` elements.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(contract(format!("duplicate tensor name '{name}'")));
            }
            if name.len() > u16::MAX as usize {
                return Err(contract(format!("tensor name of {} bytes", name.len())));
            }
            if t.rank() > u8::MAX as usize {
                return Err(contract(format!("tensor '{name}' has rank {}", t.rank())));
            }
        }
        if self.tensors.len() > u32::MAX as usize {
            return Err(contract("too many tensors"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_FIXED + self.config.len() + 4 * self.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let clen = r.u64()?;
        let cstart = r.pos;
        let config = std::str::from_utf8(r.take_u64(clen)?)
            .map_err(|e| r.err_at(cstart as u64, format!("config is not UTF-8: {e}")))?
            .to_string();
        let count = r.u32()?;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| r.err_at(at, format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(r.err_at(at, format!("duplicate tensor name '{name}'")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64()?;
                if d == 0 {
                    return Err(r.err(format!("zero dimension in '{name}'")));
                }
                shape.push(usize::try_from(d).map_err(|_| r.err("dimension overflows usize"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.err(format!("tensor '{name}' is too large")))?;
            let data: Vec<f32> = r
                .take(numel)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: u64, msg: impl Into<String>) -> Error {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        self.err_at(self.pos as u64, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn take_u64(&mut self, n: u64) -> Result<&'a [u8]> {
        let n = usize::try_from(n).map_err(|_| self.err("length overflows usize"))?;
        self.take(n)
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
