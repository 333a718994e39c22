//! Binary tensor container.
//!
//! Layout, all integers little-endian: magic `CFFA`, `u32` version, `u32`
//! tensor count, then per tensor `u32` name length, name, `u32` rank, `u32`
//! dims and `f64` values; then `u32` entry count and per entry `u32` name
//! length, name, `u64` byte length and bytes. The final entry is always
//! `sha256`, the digest of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFFA";
pub const VERSION: u32 = 1;
const DIGEST_ENTRY: &str = "sha256";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamSet,
    /// Named byte blobs, in order.
    pub entries: Vec<(String, Vec<u8>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} overflows u32")))?;
    out.extend(v.to_le_bytes());
    Ok(())
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint("entry too large".into()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn entry(&self, name: &str) -> Option<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in self.tensors.iter() {
            put_name(&mut out, name)?;
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        let entries: Vec<&(String, Vec<u8>)> =
            self.entries.iter().filter(|(n, _)| n != DIGEST_ENTRY).collect();
        put_u32(&mut out, entries.len() + 1)?;
        for (name, bytes) in entries {
            put_name(&mut out, name)?;
            out.extend((bytes.len() as u64).to_le_bytes());
            out.extend(bytes);
        }
        let digest = Sha256::digest(&out);
        put_name(&mut out, DIGEST_ENTRY)?;
        out.extend((digest.len() as u64).to_le_bytes());
        out.extend(digest);
        Ok(out)
    }

    /// Parses a whole container; nothing is returned unless every record
    /// and the digest check out.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let mut tensors = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{name}` is too large"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::with_empty(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push(name, t);
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        let mut digest_ok = false;
        for i in 0..count {
            let start = r.pos;
            let name = r.name()?;
            let len = r.u64()?;
            let body = r.take(len)?.to_vec();
            if name == DIGEST_ENTRY {
                if i + 1 != count {
                    return Err(Error::Checkpoint("digest is not the last entry".into()));
                }
                digest_ok = Sha256::digest(&bytes[..start]).as_slice() == body.as_slice();
                if !digest_ok {
                    return Err(Error::Checkpoint("digest mismatch; file is corrupted".into()));
                }
            } else {
                entries.push((name, body));
            }
        }
        if !digest_ok {
            return Err(Error::Checkpoint("missing digest".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
        }
        Ok(Checkpoint { tensors, entries })
    }

    /// Writes through a temporary file so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Names of tensors whose shape or bytes differ between two checkpoints,
/// plus names present in only one of them, in first-seen order.
pub fn diff(a: &Checkpoint, b: &Checkpoint) -> Vec<String> {
    let mut out = Vec::new();
    for (name, ta) in a.tensors.iter() {
        match b.tensors.get(name) {
            Some(tb) if tb.shape() == ta.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()) => {}
            _ => out.push(name.to_string()),
        }
    }
    for (name, _) in b.tensors.iter() {
        if a.tensors.get(name).is_none() {
            out.push(name.to_string());
        }
    }
    out
}
