//! Model checkpoint file: magic, version, model kind and configuration,
//! RNG seed, then named weight tensors as 32-bit little-endian floats,
//! with a trailing CRC32.

use std::path::Path;

use crate::wire::{put_bytes, put_f32, put_u32, put_u64, put_u8, Reader};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCDM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: u32,
    pub cols: u32,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. "hbae" or "bae".
    pub kind: String,
    /// JSON echo of the model configuration (layer dims).
    pub config_json: String,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_bytes(&mut buf, self.kind.as_bytes());
        put_bytes(&mut buf, self.config_json.as_bytes());
        put_u64(&mut buf, self.seed);
        put_u32(&mut buf, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u8(&mut buf, t.name.len() as u8);
            buf.extend_from_slice(t.name.as_bytes());
            put_u32(&mut buf, t.rows);
            put_u32(&mut buf, t.cols);
            for &v in &t.data {
                put_f32(&mut buf, v);
            }
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedFile("checkpoint header".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::ChecksumFail("checkpoint".into()));
        }
        let mut r = Reader::new(body, "checkpoint");
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CorruptPayload("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let kind = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::CorruptPayload("checkpoint kind".into()))?;
        let config_json = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::CorruptPayload("checkpoint config".into()))?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u8()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CorruptPayload("tensor name".into()))?;
            let rows = r.u32()?;
            let cols = r.u32()?;
            let count = rows as usize * cols as usize;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f32()?);
            }
            tensors.push(NamedTensor {
                name,
                rows,
                cols,
                data,
            });
        }
        r.expect_end()?;
        Ok(Checkpoint {
            kind,
            config_json,
            seed,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::CorruptPayload(format!("checkpoint lacks tensor `{name}`")))
    }
}
