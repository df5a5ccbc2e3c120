//! On-disk sample files.
//!
//! Layout, all little-endian: magic `TMS1`, version `u16`, modality `u8`
//! (0 event, 1 appearance), class `u32`, then `T C H W` as `u16` each,
//! then the row-major `f32` payload of `T*C*H*W` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FrameSequence, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TMS1";
pub const SAMPLE_VERSION: u16 = 1;

/// Cap on a single sample's element count; a corrupt header cannot demand
/// a giant allocation.
const MAX_ELEMS: u64 = 1 << 28;

pub fn save_sample(path: &Path, seq: &FrameSequence) -> Result<()> {
    let (t, c, h, w) = seq.dims();
    for &d in &[t, c, h, w] {
        if d > u16::MAX as usize {
            return Err(Error::DimensionOverflow);
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&SAMPLE_VERSION.to_le_bytes())?;
    out.write_all(&[seq.modality.to_byte()])?;
    out.write_all(&seq.class.to_le_bytes())?;
    for d in [t, c, h, w] {
        out.write_all(&(d as u16).to_le_bytes())?;
    }
    for &v in &seq.frames.data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<FrameSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u16(&mut r)?;
    if version != SAMPLE_VERSION {
        return Err(Error::VersionMismatch {
            expected: SAMPLE_VERSION as u32,
            got: version as u32,
        });
    }
    let mut b = [0u8; 1];
    read_exact(&mut r, &mut b)?;
    let modality = Modality::from_byte(b[0]).ok_or(Error::BadField("modality"))?;
    let class = read_u32(&mut r)?;
    let mut dims = [0usize; 4];
    let mut numel: u64 = 1;
    for d in &mut dims {
        *d = read_u16(&mut r)? as usize;
        if *d == 0 {
            return Err(Error::BadField("dimension"));
        }
        numel *= *d as u64;
    }
    if numel > MAX_ELEMS {
        return Err(Error::DimensionOverflow);
    }
    let mut data = Vec::with_capacity(numel as usize);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        read_exact(&mut r, &mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok(FrameSequence {
        frames: Tensor::new(dims.to_vec(), data),
        class,
        modality,
    })
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
