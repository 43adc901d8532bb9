//! Binary tensor container shared by checkpoints (`ICRE`) and raster
//! dumps (`ICRT`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic [4] | version u16 | record_count u32 | record*
//! record = name_len u16 | name utf8 | dtype u8 | rank u8 | extent u64 * rank | payload
//! ```
//!
//! dtype 0 = f64, 1 = f32, 2 = utf8 text (rank 1, extent = byte length),
//! 3 = u64. Adam state is stored as ordinary records named
//! `adam.t`, `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use super::optim::AdamState;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ICRE";
pub const RASTER_MAGIC: [u8; 4] = *b"ICRT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    F32(Tensor),
    Text(String),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; 4],
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(magic: [u8; 4]) -> Self {
        Self {
            magic,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, payload: Payload) {
        self.records.push(Record {
            name: name.into(),
            payload,
        });
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.push(name, Payload::Text(text.into()));
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .map(|r| &r.payload)
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Payload::Text(s)) => Ok(s),
            _ => Err(Error::Format {
                kind: "checkpoint",
                reason: format!("missing text record {name}"),
            }),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Payload::F64(t)) | Some(Payload::F32(t)) => Ok(t),
            _ => Err(Error::Format {
                kind: "checkpoint",
                reason: format!("missing tensor record {name}"),
            }),
        }
    }

    /// Captures every parameter and buffer, an architecture descriptor and
    /// optionally the optimizer state.
    pub fn from_store(store: &ParamStore, descriptor: &str, adam: Option<&AdamState>) -> Self {
        let mut ck = Self::new(CHECKPOINT_MAGIC);
        ck.push_text("arch", descriptor);
        for (_, p) in store.iter() {
            ck.push(p.name.clone(), Payload::F64(p.value.clone()));
        }
        if let Some(st) = adam {
            ck.push("adam.t", Payload::U64(vec![st.t]));
            let trainable = store.iter().filter(|(_, p)| p.trainable);
            for ((_, p), (m, v)) in trainable.zip(st.m.iter().zip(&st.v)) {
                ck.push(format!("adam.m.{}", p.name), Payload::F64(m.clone()));
                ck.push(format!("adam.v.{}", p.name), Payload::F64(v.clone()));
            }
        }
        ck
    }

    /// Loads parameter values into `store`, checking names and shapes.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter_mut() {
            let t = self.tensor(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Dimension {
                    op: "restore_store",
                    left: p.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn restore_adam(&self, store: &ParamStore) -> Result<Option<AdamState>> {
        let Some(Payload::U64(t)) = self.get("adam.t") else {
            return Ok(None);
        };
        let mut st = AdamState::new(store);
        st.t = t[0];
        let trainable = store.iter().filter(|(_, p)| p.trainable);
        for (slot, (_, p)) in trainable.enumerate() {
            st.m[slot] = self.tensor(&format!("adam.m.{}", p.name))?.clone();
            st.v[slot] = self.tensor(&format!("adam.v.{}", p.name))?.clone();
        }
        Ok(Some(st))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            match &r.payload {
                Payload::F64(t) => {
                    header(&mut out, 0, t.shape());
                    t.data()
                        .iter()
                        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                Payload::F32(t) => {
                    header(&mut out, 1, t.shape());
                    t.data()
                        .iter()
                        .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes()));
                }
                Payload::Text(s) => {
                    header(&mut out, 2, &[s.len()]);
                    out.extend_from_slice(s.as_bytes());
                }
                Payload::U64(v) => {
                    header(&mut out, 3, &[v.len()]);
                    v.iter()
                        .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = rd.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC && magic != RASTER_MAGIC {
            return Err(bad(format!("unknown magic {magic:?}")));
        }
        let version = u16::from_le_bytes(rd.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = rd.u32()?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(rd.take(2)?.try_into().expect("2 bytes")) as usize;
            let name =
                String::from_utf8(rd.take(nlen)?.to_vec()).map_err(|e| bad(e.to_string()))?;
            let dtype = rd.take(1)?[0];
            let rank = rd.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = match dtype {
                0 => {
                    let raw = rd.take(n * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Payload::F64(Tensor::new(shape, data)?)
                }
                1 => {
                    let raw = rd.take(n * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect();
                    Payload::F32(Tensor::new(shape, data)?)
                }
                2 => Payload::Text(
                    String::from_utf8(rd.take(n)?.to_vec()).map_err(|e| bad(e.to_string()))?,
                ),
                3 => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        v.push(rd.u64()?);
                    }
                    Payload::U64(v)
                }
                other => return Err(bad(format!("unknown dtype code {other}"))),
            };
            records.push(Record { name, payload });
        }
        if rd.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(Self { magic, records })
    }

    /// Writes the checkpoint, creating missing parent directories.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) {
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn bad(reason: String) -> Error {
    Error::Format {
        kind: "tensor container",
        reason,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
