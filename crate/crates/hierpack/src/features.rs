//! Feature files: magic `HEPF`, u32 version, u32 N, u32 D, then N·D
//! little-endian f32 values in row-major order.

use std::path::Path;

use hierpack_core::data::midpoints;
use hierpack_core::diffcore::Tensor;

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"HEPF";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;

/// Serializes `features`, narrowing every value to f32.
pub fn encode(features: &Tensor) -> Vec<u8> {
    let (n, d) = (features.rows(), features.row_width());
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * n * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses a feature file, widening to f64. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::format(path, bytes.len() as u64, format!("header needs {HEADER_BYTES} bytes")));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected HEPF"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let (n, d) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    let expected = HEADER_BYTES as u64 + 4 * n as u64 * d as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected as usize) as u64,
            format!("header declares {n}x{d} ({expected} bytes) but file has {} bytes", bytes.len()),
        ));
    }
    let data = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
        .collect();
    Ok(Tensor::matrix(n, d, data)?)
}

pub fn write(path: &Path, features: &Tensor) -> Result<()> {
    fsutil::write_atomic(path, &encode(features))
}

/// Loads a feature matrix and the midpoint timestamps of its segments.
pub fn load(path: &Path) -> Result<(Tensor, Vec<f64>)> {
    let t = decode(&fsutil::read(path)?, path)?;
    let pe = midpoints(t.rows());
    Ok((t, pe))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::from_rows(&[[0.5, -1.25, 3.0], [1e-3, 2.0, -0.0]]).unwrap()
    }

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let t = sample();
        let back = decode(&encode(&t), Path::new("x")).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let again = encode(&back);
        assert_eq!(again, encode(&t));
    }

    #[test]
    fn size_matches_header() {
        assert_eq!(encode(&sample()).len(), HEADER_BYTES + 2 * 3 * 4);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut b = encode(&sample());
        b.pop();
        match decode(&b, Path::new("x")).unwrap_err() {
            Error::Format { offset, message, .. } => {
                assert_eq!(offset, b.len() as u64);
                assert!(message.contains("2x3"), "{message}");
            }
            e => panic!("{e}"),
        }
        assert!(matches!(decode(&b[..10], Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode(&sample());
        b[0] = b'X';
        assert!(matches!(decode(&b, Path::new("x")), Err(Error::Format { offset: 0, .. })));
        let mut b = encode(&sample());
        b[4] = 9;
        assert!(matches!(decode(&b, Path::new("x")), Err(Error::Format { offset: 4, .. })));
    }
}
