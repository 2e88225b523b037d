//! Little-endian checkpoint container: magic, version, then named sections.
//!
//! Section layout: `u32` name length, UTF-8 name, `u8` kind. Kind 0 is an
//! f32 tensor (`u32` rank, `u32` dims, data); kind 1 is a `u64`-length byte
//! blob holding JSON.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{LodeError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LODE";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_BYTES: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    Tensor { shape: Vec<u32>, data: Vec<f32> },
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<(String, SectionData)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&SectionData> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn has(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn tensor(&self, name: &str) -> Result<&[f32]> {
        match self.get(name) {
            Some(SectionData::Tensor { data, .. }) => Ok(data),
            Some(_) => Err(LodeError::Config(format!("checkpoint section {name} is not a tensor"))),
            None => Err(LodeError::Config(format!("checkpoint lacks section {name}"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(SectionData::Bytes(b)) => Ok(b),
            Some(_) => Err(LodeError::Config(format!("checkpoint section {name} is not a byte blob"))),
            None => Err(LodeError::Config(format!("checkpoint lacks section {name}"))),
        }
    }

    /// Appends a rank-1 tensor; values are narrowed to f32.
    pub fn push_vector(&mut self, name: &str, values: &[f64]) {
        let data = values.iter().map(|&v| v as f32).collect();
        self.sections.push((name.to_string(), SectionData::Tensor { shape: vec![values.len() as u32], data }));
    }

    pub fn push_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.sections.push((name.to_string(), SectionData::Bytes(bytes)));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
        out.write_u32::<LE>(self.sections.len() as u32).unwrap();
        for (name, data) in &self.sections {
            out.write_u32::<LE>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            match data {
                SectionData::Tensor { shape, data } => {
                    out.push(KIND_TENSOR);
                    out.write_u32::<LE>(shape.len() as u32).unwrap();
                    for &d in shape {
                        out.write_u32::<LE>(d).unwrap();
                    }
                    for &v in data {
                        out.write_f32::<LE>(v).unwrap();
                    }
                }
                SectionData::Bytes(b) => {
                    out.push(KIND_BYTES);
                    out.write_u64::<LE>(b.len() as u64).unwrap();
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(LodeError::Config("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LE>().map_err(|_| truncated("version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(LodeError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let n = r.read_u32::<LE>().map_err(|_| truncated("section count"))?;
        let mut sections = Vec::new();
        for _ in 0..n {
            let len = r.read_u32::<LE>().map_err(|_| truncated("section name"))? as usize;
            let name = read_vec(&mut r, len, "section name")?;
            let name = String::from_utf8(name).map_err(|_| LodeError::Config("section name is not UTF-8".into()))?;
            let kind = r.read_u8().map_err(|_| truncated(&name))?;
            let data = match kind {
                KIND_TENSOR => {
                    let rank = r.read_u32::<LE>().map_err(|_| truncated(&name))? as usize;
                    let mut shape = Vec::with_capacity(rank.min(8));
                    for _ in 0..rank {
                        shape.push(r.read_u32::<LE>().map_err(|_| truncated(&name))?);
                    }
                    let count: u64 = shape.iter().map(|&d| d as u64).product();
                    let raw = read_vec(&mut r, (count as usize).saturating_mul(4), &name)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    SectionData::Tensor { shape, data }
                }
                KIND_BYTES => {
                    let len = r.read_u64::<LE>().map_err(|_| truncated(&name))? as usize;
                    SectionData::Bytes(read_vec(&mut r, len, &name)?)
                }
                k => return Err(LodeError::Config(format!("unknown section kind {k} in {name}"))),
            };
            sections.push((name, data));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(LodeError::Config("trailing bytes after last checkpoint section".into()));
        }
        Ok(Self { sections })
    }
}

fn truncated(what: &str) -> LodeError {
    LodeError::Truncated(format!("checkpoint ends inside {what}"))
}

fn read_vec(r: &mut Cursor<&[u8]>, len: usize, what: &str) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(truncated(what));
    }
    let mut v = vec![0u8; len];
    r.read_exact(&mut v).map_err(|_| truncated(what))?;
    Ok(v)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
