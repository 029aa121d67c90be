//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//! `"WLDM"`, `u32` version, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims,
//! `f32` payload; finally a CRC-32 of everything before it.
//! Entries are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;

pub const MAGIC: &[u8; 4] = b"WLDM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Entry>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds an entry; duplicate names are rejected.
    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        if name.is_empty() {
            return Err(ck_err("empty entry name"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(ck_err(format!("{name}: shape {shape:?} does not match {} values", data.len())));
        }
        if self.entries.contains_key(name) {
            return Err(ck_err(format!("duplicate entry {name}")));
        }
        self.entries.insert(name.to_string(), Entry { shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| ck_err(format!("missing entry {name}")))
    }

    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let e = self.get(name)?;
        if e.shape != shape {
            return Err(ck_err(format!("{name}: stored shape {:?}, expected {shape:?}", e.shape)));
        }
        Ok(&e.data)
    }

    /// Stores an integer exactly as four 16-bit limbs.
    pub fn insert_u64(&mut self, name: &str, v: u64) -> Result<()> {
        let limbs = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
        self.insert(name, &[4], limbs)
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let d = self.get_shaped(name, &[4])?;
        d.iter().enumerate().try_fold(0u64, |acc, (i, &l)| {
            if !(0.0..=65535.0).contains(&l) || l.fract() != 0.0 {
                return Err(ck_err(format!("{name}: bad integer limb {l}")));
            }
            Ok(acc | ((l as u64) << (16 * i)))
        })
    }

    /// Stores text one byte per value.
    pub fn insert_str(&mut self, name: &str, s: &str) -> Result<()> {
        let b: Vec<f32> = s.bytes().map(f32::from).collect();
        self.insert(name, &[b.len()], b)
    }

    pub fn get_str(&self, name: &str) -> Result<String> {
        let e = self.get(name)?;
        let bytes = e
            .data
            .iter()
            .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { Err(ck_err(format!("{name}: not a byte string"))) })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| ck_err(format!("{name}: {e}")))
    }

    /// Adds every parameter of `m` under `prefix.`.
    pub fn insert_module(&mut self, prefix: &str, m: &dyn Module) -> Result<()> {
        for (name, p) in m.named_params(prefix) {
            self.insert(&name, p.shape(), p.to_vec())?;
        }
        Ok(())
    }

    /// Overwrites every parameter of `m` from entries under `prefix.`.
    pub fn load_module(&self, prefix: &str, m: &dyn Module) -> Result<()> {
        for (name, p) in m.named_params(prefix) {
            let d = self.get_shaped(&name, p.shape())?;
            p.set_data(d.to_vec())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(ck_err(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(ck_err("bad magic, not a checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(ck_err(format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})")));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(ck_err(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|e| ck_err(format!("entry name: {e}")))?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ck_err(format!("{name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| ck_err("payload overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            ck.insert(&name, &shape, data)?;
        }
        if r.pos != body.len() {
            return Err(ck_err(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ck_err(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ck_err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| ck_err(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ck_err("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    #[test]
    fn round_trip_and_checksum() {
        let mut ck = Checkpoint::new();
        ck.insert("a.w", &[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        ck.insert_u64("step", 123_456_789_012).unwrap();
        ck.insert_str("cfg", "x = 1").unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get_u64("step").unwrap(), 123_456_789_012);
        assert_eq!(back.get_str("cfg").unwrap(), "x = 1");
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn duplicates_and_shape_mismatch_rejected() {
        let mut ck = Checkpoint::new();
        ck.insert("x", &[1], vec![0.0]).unwrap();
        assert!(ck.insert("x", &[1], vec![0.0]).is_err());
        assert!(ck.insert("y", &[2], vec![0.0]).is_err());
    }
}
