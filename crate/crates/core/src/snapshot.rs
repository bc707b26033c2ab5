//! Binary field snapshots.
//!
//! Layout (little endian): `b"NLSF"`, version `u32`, dimension `u32`,
//! points per axis `u32`, half-width `f64`, then `N^d` pairs `(re, im)` of `f64`
//! in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{ComplexField, C64};
use crate::grid::SpatialGrid;

pub const MAGIC: &[u8; 4] = b"NLSF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub fn encode(f: &ComplexField) -> Vec<u8> {
    let g = f.grid();
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * f.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(g.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(g.n() as u32).to_le_bytes());
    out.extend_from_slice(&g.half_width().to_le_bytes());
    for z in f.values() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("slice of four bytes"))
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("slice of eight bytes"))
}

/// Parses a snapshot; every header field and value is validated.
pub fn decode(bytes: &[u8]) -> Result<ComplexField> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Snapshot(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let dim = u32_at(bytes, 8) as usize;
    let n = u32_at(bytes, 12) as usize;
    let half_width = f64_at(bytes, 16);
    let grid = SpatialGrid::new(dim, n, half_width)
        .map_err(|e| Error::Snapshot(format!("header: {e}")))?;
    let expected = grid
        .len()
        .checked_mul(16)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Snapshot("size overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Snapshot(format!(
            "expected {expected} bytes for {n}^{dim} points, found {}",
            bytes.len()
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(16)
        .map(|c| C64::new(f64_at(c, 0), f64_at(c, 8)))
        .collect();
    ComplexField::new(grid, values).map_err(|e| Error::Snapshot(e.to_string()))
}

pub fn write(path: impl AsRef<Path>, f: &ComplexField) -> Result<()> {
    std::fs::write(path, encode(f))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<ComplexField> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ComplexField {
        let g = SpatialGrid::new(2, 8, 1.5).unwrap();
        ComplexField::from_fn(g, |x| C64::new(x[0] * 0.5, -x[1]))
    }

    #[test]
    fn round_trip() {
        let f = sample();
        let bytes = encode(&f);
        assert_eq!(bytes.len(), HEADER_LEN + 16 * 64);
        assert_eq!(decode(&bytes).unwrap(), f);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..10]).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(decode(&b).is_err());
        let mut b = bytes.clone();
        b[12..16].copy_from_slice(&12u32.to_le_bytes());
        assert!(decode(&b).is_err());
        let mut b = bytes.clone();
        b[16..24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode(&b).is_err());
        let mut b = bytes;
        b[HEADER_LEN..HEADER_LEN + 8].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(decode(&b).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.nlsf");
        write(&p, &sample()).unwrap();
        assert_eq!(read(&p).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn decode_header_fuzz(dim in 0u32..5, n in 0u32..70, l in -2.0f64..3.0) {
            let mut b = Vec::new();
            b.extend_from_slice(MAGIC);
            b.extend_from_slice(&VERSION.to_le_bytes());
            b.extend_from_slice(&dim.to_le_bytes());
            b.extend_from_slice(&n.to_le_bytes());
            b.extend_from_slice(&l.to_le_bytes());
            b.extend(std::iter::repeat_n(0u8, 16 * 64));
            let _ = decode(&b);
        }
    }
}
