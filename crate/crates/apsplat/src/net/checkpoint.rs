//! Parameter checkpoint file: a small self-describing binary layout with a
//! version tag and a spec hash. Values are stored as little-endian f32;
//! loading a checkpoint whose spec hash does not match the caller's is an
//! error.
//!
//! Layout (all integers little-endian):
//!   magic "APCK" | u32 version | u64 spec_hash | u64 config_hash |
//!   u32 n_tensors | per tensor: u16 name_len, name bytes, u8 ndim,
//!   u32 dims..., f32 values...

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 4] = b"APCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("spec hash mismatch: checkpoint {found:#018x}, expected {expected:#018x}")]
    SpecHashMismatch { expected: u64, found: u64 },
}

pub fn write_checkpoint(
    path: &Path,
    spec_hash: u64,
    config_hash: u64,
    tensors: &[(&str, &Tensor)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&spec_hash.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(CheckpointError::Format(format!("tensor name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        if t.shape.len() > u8::MAX as usize {
            return Err(CheckpointError::Format("tensor rank too large".into()));
        }
        w.write_all(&[t.shape.len() as u8])?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(
    path: &Path,
    expected_spec_hash: u64,
) -> Result<(u64, Vec<(String, Tensor)>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let spec_hash = read_u64(&mut r)?;
    if spec_hash != expected_spec_hash {
        return Err(CheckpointError::SpecHashMismatch {
            expected: expected_spec_hash,
            found: spec_hash,
        });
    }
    let config_hash = read_u64(&mut r)?;
    let n = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Format("tensor name is not utf8".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            values.push(f32::from_le_bytes(buf) as f64);
        }
        tensors.push((
            name,
            Tensor::from_values(&shape, values)
                .map_err(|e| CheckpointError::Format(e.to_string()))?,
        ));
    }
    Ok((config_hash, tensors))
}

fn read_u16(r: &mut impl Read) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
