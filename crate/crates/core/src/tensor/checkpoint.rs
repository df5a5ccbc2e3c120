//! Binary checkpoint serialization for named parameter lists.
//!
//! Layout, all little-endian:
//! magic `TMKT`, version `u32`, parameter count `u32`, then per parameter:
//! name length `u16` + UTF-8 name, rank `u8`, each dim as `u32`, then the
//! row-major `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TMKT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "parameter name too long");
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        assert!(t.rank() <= u8::MAX as usize, "parameter rank too large");
        w.write_all(&[t.rank() as u8])?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Hard cap on a single tensor's element count so a corrupt header cannot
/// trigger a huge allocation.
const MAX_ELEMS: u64 = 1 << 28;

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            got: version,
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf).map_err(|_| Error::BadField("parameter name"))?;
        let mut rank_buf = [0u8; 1];
        read_exact(&mut r, &mut rank_buf)?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u32(&mut r)? as u64;
            numel = numel
                .checked_mul(d)
                .ok_or(Error::DimensionOverflow)?;
            if numel > MAX_ELEMS {
                return Err(Error::DimensionOverflow);
            }
            shape.push(d as usize);
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        params.push((name, Tensor::new(shape, data)));
    }
    Ok(params)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
