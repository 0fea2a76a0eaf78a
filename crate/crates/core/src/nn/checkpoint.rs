//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DUATCKPT"
//! version      u32      1
//! meta_len     u32      length of the UTF-8 metadata block
//! metadata     bytes    free text (the CLI stores the effective config)
//! count        u32      number of records
//! record*:
//!   name_len   u32
//!   name       bytes    UTF-8 dotted parameter or buffer name
//!   dtype      u8       1 = f64, 2 = f32
//!   shape      4 x u32  (n, c, h, w)
//!   data       numel x dtype, little-endian
//! ```
//!
//! Parameters and running-statistic buffers share one namespace. Values are
//! written as f64, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"DUATCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_F32: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub records: Vec<Record>,
}

fn ckpt_err(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: &str) -> Self {
        let params = store.params().iter().map(|p| Record {
            name: p.name.clone(),
            shape: p.value().shape(),
            data: p.value().to_vec(),
        });
        let buffers = store.buffers().iter().map(|b| Record {
            name: b.name.clone(),
            shape: b.shape,
            data: b.data.clone(),
        });
        Checkpoint {
            metadata: metadata.to_string(),
            records: params.chain(buffers).collect(),
        }
    }

    /// Loads every parameter and buffer of `store` from this checkpoint.
    /// Missing, surplus or mis-shaped records are errors.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let expected = store.params().len() + store.buffers().len();
        if self.records.len() != expected {
            return Err(ckpt_err(format!(
                "checkpoint has {} records, model expects {expected}",
                self.records.len()
            )));
        }
        for rec in &self.records {
            if let Some(id) = store.find(&rec.name) {
                let value = Tensor::new(rec.shape, rec.data.clone())?;
                store
                    .set_value(id, value)
                    .map_err(|e| ckpt_err(format!("{}: {e}", rec.name)))?;
            } else if let Some(id) = store.find_buffer(&rec.name) {
                if store.buffer(id).shape != rec.shape {
                    return Err(ckpt_err(format!("{}: shape mismatch", rec.name)));
                }
                store.set_buffer(id, rec.data.clone())?;
            } else {
                return Err(ckpt_err(format!("unknown record {}", rec.name)));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for rec in &self.records {
            w.write_all(&(rec.name.len() as u32).to_le_bytes())?;
            w.write_all(rec.name.as_bytes())?;
            w.write_all(&[DTYPE_F64])?;
            for d in rec.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in &rec.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(ckpt_err("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let metadata = String::from_utf8(read_bytes(&mut r, meta_len)?)
            .map_err(|_| ckpt_err("metadata is not UTF-8"))?;
        let count = read_u32(&mut r)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|_| ckpt_err("record name is not UTF-8"))?;
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag)?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = read_u32(&mut r)? as usize;
            }
            let len: usize = shape.iter().product();
            let data = match tag[0] {
                DTYPE_F64 => read_bytes(&mut r, len * 8)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
                DTYPE_F32 => read_bytes(&mut r, len * 4)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
                    .collect(),
                t => return Err(ckpt_err(format!("{name}: unknown dtype tag {t}"))),
            };
            records.push(Record { name, shape, data });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| ckpt_err(e.to_string()))? != 0 {
            return Err(ckpt_err("trailing bytes after last record"));
        }
        Ok(Checkpoint { metadata, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| ckpt_err("unexpected end of checkpoint"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    r.take(len as u64)
        .read_to_end(&mut out)
        .map_err(|e| ckpt_err(e.to_string()))?;
    if out.len() != len {
        return Err(ckpt_err("unexpected end of checkpoint"));
    }
    Ok(out)
}
