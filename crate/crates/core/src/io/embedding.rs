//! Embedding files.
//!
//! ```text
//! "DETB"   4 bytes
//! version  u32 LE (= 1)
//! dim      u32 LE
//! count    u64 LE
//! payload  count * dim f32 LE, row-major
//! ```
//!
//! The file size is exactly `20 + 4 * dim * count` bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{format_err, invalid, Result};
use crate::types::EmbeddingMatrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DETB";
pub const EMBEDDING_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode_embeddings<W: Write>(m: &EmbeddingMatrix, mut w: W) -> Result<()> {
    if m.dim() == 0 {
        return invalid("cannot write embeddings of dimension 0");
    }
    let dim = u32::try_from(m.dim())
        .map_err(|_| crate::Error::InvalidInput(format!("dimension {} too large", m.dim())))?;
    if m.values().len() != m.dim() * m.count() {
        return invalid("matrix storage does not match count x dim");
    }
    if let Some(pos) = m.values().iter().position(|v| !v.is_finite()) {
        return invalid(format!("non-finite value at flat index {pos}"));
    }
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(m.count() as u64).to_le_bytes())?;
    for v in m.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < HEADER_LEN {
        return format_err(
            bytes.len() as u64,
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        );
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return format_err(0, format!("bad magic {:?}", &bytes[..4]));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != EMBEDDING_VERSION {
        return format_err(4, format!("unsupported version {version}"));
    }
    let dim = u32_at(8) as usize;
    if dim == 0 {
        return format_err(8, "dimension is 0");
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = (count as u128) * (dim as u128) * 4 + HEADER_LEN as u128;
    if expected != bytes.len() as u128 {
        return format_err(
            HEADER_LEN as u64,
            format!(
                "expected {expected} bytes for {count} x {dim} floats, found {}",
                bytes.len()
            ),
        );
    }
    let mut values = Vec::with_capacity(count as usize * dim);
    for (i, c) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return format_err((HEADER_LEN + 4 * i) as u64, "non-finite value");
        }
        values.push(v);
    }
    EmbeddingMatrix::new(dim, values)
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    encode_embeddings(m, BufWriter::new(File::create(path)?))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    decode_embeddings(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;

    fn encode(m: &EmbeddingMatrix) -> Vec<u8> {
        let mut b = Vec::new();
        encode_embeddings(m, &mut b).unwrap();
        b
    }

    #[test]
    fn layout() {
        let m = EmbeddingMatrix::new(2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let b = encode(&m);
        assert_eq!(b.len(), 20 + 4 * 4);
        assert_eq!(&b[..4], b"DETB");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let m = EmbeddingMatrix::new(3, vec![0.0; 12]).unwrap();
        let b = encode(&m);
        let err = decode_embeddings(&b[..b.len() - 2]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 68"), "{msg}");
        assert!(msg.contains("found 66"), "{msg}");
    }

    #[test]
    fn header_checks() {
        let m = EmbeddingMatrix::new(3, vec![0.0; 3]).unwrap();
        let mut b = encode(&m);
        b[0] = b'Z';
        assert!(matches!(decode_embeddings(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = encode(&m);
        b[4] = 2;
        assert!(matches!(decode_embeddings(&b), Err(Error::Format { offset: 4, .. })));
        let mut b = encode(&m);
        b[8] = 0;
        assert!(matches!(decode_embeddings(&b), Err(Error::Format { offset: 8, .. })));
        assert!(decode_embeddings(b"DET").is_err());
        let mut b = encode(&m);
        b[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_embeddings(&b), Err(Error::Format { offset: 20, .. })));
    }

    #[test]
    fn zero_dim_rejected_on_write() {
        let m = EmbeddingMatrix::from_parts_unchecked(0, 0, vec![]);
        assert!(encode_embeddings(&m, Vec::new()).is_err());
    }

    #[test]
    fn empty_matrix_round_trips() {
        let m = EmbeddingMatrix::empty(7);
        assert_eq!(decode_embeddings(&encode(&m)).unwrap(), m);
    }

    proptest! {
        #[test]
        fn round_trip_bitwise(dim in 1usize..40, rows in 0usize..30, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::seed::rng_from(seed);
            let vals: Vec<f32> = (0..dim * rows)
                .map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF))
                .collect();
            let m = EmbeddingMatrix::new(dim, vals).unwrap();
            let back = decode_embeddings(&encode(&m)).unwrap();
            prop_assert_eq!(back.dim(), dim);
            prop_assert_eq!(back.count(), rows);
            prop_assert!(back.values().iter().zip(m.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
