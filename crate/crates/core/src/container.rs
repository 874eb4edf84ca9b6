//! Versioned binary array container shared by images, label masks and
//! probability stacks.
//!
//! Layout (little-endian):
//!
//! | field            | type                         |
//! |------------------|------------------------------|
//! | magic            | `b"LSEG"`                    |
//! | version          | `u16` (= 1)                  |
//! | kind             | `u8` (see [`Kind`])          |
//! | dtype            | `u8` (1 = f32, 2 = f64, 3 = u8) |
//! | ndim             | `u8`, then `ndim × u32` shape (C×H×W or H×W) |
//! | wavelengths      | `u16` count, then `f64` each (µm) |
//! | gsd              | `f64`                        |
//! | id               | `u16` length, UTF-8 (subset or taxonomy id) |
//! | meta             | `u32` length, UTF-8 `key = value` lines |
//! | payload          | row-major values             |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSEG";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Image = 1,
    Label = 2,
    Probabilities = 3,
    Checkpoint = 4,
}

impl Kind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Image),
            2 => Some(Self::Label),
            3 => Some(Self::Probabilities),
            4 => Some(Self::Checkpoint),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 1,
            Payload::F64(_) => 2,
            Payload::U8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
            Payload::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub shape: Vec<usize>,
    pub wavelengths: Vec<f64>,
    pub gsd: f64,
    pub id: String,
    pub meta: String,
    pub payload: Payload,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.payload.len() * 4);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.kind as u8);
        b.push(self.payload.dtype());
        b.push(self.shape.len() as u8);
        for &d in &self.shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.extend_from_slice(&(self.wavelengths.len() as u16).to_le_bytes());
        for w in &self.wavelengths {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b.extend_from_slice(&self.gsd.to_le_bytes());
        b.extend_from_slice(&(self.id.len() as u16).to_le_bytes());
        b.extend_from_slice(self.id.as_bytes());
        b.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        b.extend_from_slice(self.meta.as_bytes());
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => b.extend_from_slice(v),
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic bytes".into());
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(format!("unsupported container version {version}"));
        }
        let kind = Kind::from_u8(r.u8()?).ok_or("unknown container kind")?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let nw = r.u16()? as usize;
        let wavelengths = (0..nw).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let gsd = r.f64()?;
        let id_len = r.u16()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| "id is not UTF-8")?;
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| "meta is not UTF-8")?;
        let n: usize = shape.iter().product();
        let payload = match dtype {
            1 => Payload::F32(r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => Payload::F64(r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            3 => Payload::U8(r.take(n)?.to_vec()),
            d => return Err(format!("unknown dtype {d}")),
        };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { kind, shape, wavelengths, gsd, id, meta, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
    }

    pub fn expect_kind(self, kind: Kind, path: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format { path: path.to_path_buf(), msg: format!("expected {kind:?} container, found {:?}", self.kind) });
        }
        Ok(self)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or("truncated container")?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 1..64), id in "[a-z0-9_]{0,12}", gsd in 0.01f64..100.0) {
            let c = Container {
                kind: Kind::Image,
                shape: vec![1, 1, vals.len()],
                wavelengths: vec![0.49, 0.56],
                gsd,
                id,
                meta: "quality = exact\n".into(),
                payload: Payload::F32(vals),
            };
            prop_assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let c = Container { kind: Kind::Label, shape: vec![2, 2], wavelengths: vec![], gsd: 1.0, id: "t".into(), meta: String::new(), payload: Payload::U8(vec![0, 1, 2, 255]) };
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"LSEG");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(b[6], 2);
        assert_eq!(b[7], 3);
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_rejected() {
        let c = Container { kind: Kind::Label, shape: vec![2, 2], wavelengths: vec![], gsd: 1.0, id: "t".into(), meta: String::new(), payload: Payload::U8(vec![0, 1, 2, 255]) };
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }
}
