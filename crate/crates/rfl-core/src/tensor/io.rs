//! Binary tensor blobs.
//!
//! Layout: rank as u32 little-endian, one u32 extent per axis, then the
//! values as little-endian f64 in row-major order. Scalars have rank 0.

use super::Buffer;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub fn write_buffer<W: Write>(w: &mut W, buf: &Buffer) -> Result<()> {
    let shape = buf.shape();
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        if d > u32::MAX as usize {
            return Err(Error::Data(format!("extent {} exceeds u32", d)));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in buf.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_buffer<R: Read>(r: &mut R) -> Result<Buffer> {
    let rank = read_u32(r, "tensor blob rank")? as usize;
    if rank > 8 {
        return Err(Error::Parse {
            what: "tensor blob".into(),
            offset: 0,
            detail: format!("rank {} is implausible", rank),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "tensor blob extent")? as usize);
    }
    let n = super::numel(&shape);
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for i in 0..n {
        r.read_exact(&mut b).map_err(|e| Error::Parse {
            what: "tensor blob".into(),
            offset: (4 + 4 * rank + 8 * i) as u64,
            detail: format!("truncated data: {}", e),
        })?;
        data.push(f64::from_le_bytes(b));
    }
    Buffer::new(data, shape)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Parse {
        what: what.into(),
        offset: 0,
        detail: format!("truncated: {}", e),
    })?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let buf = Buffer::from_fn(vec![2, 3, 4], |i| (i as f64).sin() * 1e17);
        let mut bytes = Vec::new();
        write_buffer(&mut bytes, &buf).unwrap();
        assert_eq!(bytes.len(), 4 + 3 * 4 + 24 * 8);
        let back = read_buffer(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.shape(), buf.shape());
        for (a, b) in back.data().iter().zip(buf.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn scalar_round_trip() {
        let buf = Buffer::scalar(-0.0);
        let mut bytes = Vec::new();
        write_buffer(&mut bytes, &buf).unwrap();
        let back = read_buffer(&mut bytes.as_slice()).unwrap();
        assert!(back.shape().is_empty());
        assert_eq!(back.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncated_blob_reports_parse_error() {
        let buf = Buffer::from_fn(vec![4], |i| i as f64);
        let mut bytes = Vec::new();
        write_buffer(&mut bytes, &buf).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_buffer(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, crate::error::Error::Parse { .. }));
    }
}
