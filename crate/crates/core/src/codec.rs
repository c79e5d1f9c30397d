//! Raw little-endian array blobs.
//!
//! Layout: 4 magic bytes, `u32` rank, `rank × u32` dims, then row-major
//! elements. `CMT1` blobs carry `f32` elements (pixel data); `CMT8` blobs use
//! the same layout with `f64` elements so parameters survive bit-exactly.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC_F32: &[u8; 4] = b"CMT1";
pub const MAGIC_F64: &[u8; 4] = b"CMT8";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn write_blob<W: Write>(out: &mut W, precision: Precision, dims: &[usize], data: &[f64]) -> std::io::Result<()> {
    let magic = match precision {
        Precision::F32 => MAGIC_F32,
        Precision::F64 => MAGIC_F64,
    };
    out.write_all(magic)?;
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 8);
    match precision {
        Precision::F32 => data.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Precision::F64 => data.iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    out.write_all(&buf)
}

fn read_u32<R: Read>(input: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one blob, returning its dims and elements widened to `f64`.
pub fn read_blob<R: Read>(input: &mut R) -> Result<(Precision, Vec<usize>, Vec<f64>)> {
    let io = |e: std::io::Error| Error::Data(format!("truncated array blob: {e}"));
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io)?;
    let precision = match &magic {
        m if m == MAGIC_F32 => Precision::F32,
        m if m == MAGIC_F64 => Precision::F64,
        other => return Err(Error::Data(format!("bad array magic {other:?}"))),
    };
    let rank = read_u32(input).map_err(io)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Data(format!("unsupported array rank {rank}")));
    }
    let dims = (0..rank)
        .map(|_| read_u32(input).map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io)?;
    let len: usize = dims.iter().product();
    let width = if precision == Precision::F32 { 4 } else { 8 };
    let mut raw = vec![0u8; len * width];
    input.read_exact(&mut raw).map_err(io)?;
    let data = match precision {
        Precision::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Precision::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok((precision, dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let mut buf = Vec::new();
        write_blob(&mut buf, Precision::F32, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(&buf[..4], b"CMT1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &3u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 16 + 6 * 4);
    }

    #[test]
    fn f64_blobs_are_lossless() {
        let data = [0.1, -1e-300, std::f64::consts::PI];
        let mut buf = Vec::new();
        write_blob(&mut buf, Precision::F64, &[3], &data).unwrap();
        let (p, dims, back) = read_blob(&mut buf.as_slice()).unwrap();
        assert_eq!(p, Precision::F64);
        assert_eq!(dims, vec![3]);
        assert_eq!(back, data);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_blob(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_blob(&mut buf, Precision::F32, &[4], &[1.0; 4]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_blob(&mut buf.as_slice()).is_err());
    }
}
