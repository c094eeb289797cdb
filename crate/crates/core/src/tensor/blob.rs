//! Tensor blob files.
//!
//! Layout: magic `TBLB`, version byte `1`, dtype byte (0 = f32, 1 = f64), rank
//! byte, four reserved zero bytes, `rank` little-endian u64 extents, then the
//! row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::{DType, Tensor};
use crate::error::{bail, Result};

pub const MAGIC: &[u8; 4] = b"TBLB";
pub const VERSION: u8 = 1;
const HEADER: usize = 11;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let width = match t.dtype() {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(HEADER + 8 * t.rank() + width * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match t.dtype() {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0; 4]);
    for d in t.dims() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in t.data() {
        match t.dtype() {
            DType::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        bail!(Format, "missing TBLB magic");
    }
    if bytes[4] != VERSION {
        bail!(Format, "unsupported blob version {}", bytes[4]);
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        d => bail!(Format, "unknown dtype byte {}", d),
    };
    let rank = bytes[6] as usize;
    if bytes[7..11] != [0; 4] {
        bail!(Format, "reserved header bytes are not zero");
    }
    if bytes.len() < HEADER + 8 * rank {
        bail!(Format, "truncated blob header");
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let at = HEADER + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize
        })
        .collect();
    let n = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let payload = &bytes[HEADER + 8 * rank..];
    match n {
        Some(n) if n.checked_mul(width) == Some(payload.len()) => {}
        _ => bail!(
            Format,
            "payload of {} bytes does not match dims {:?}",
            payload.len(),
            dims
        ),
    }
    let data = payload
        .chunks_exact(width)
        .map(|c| match dtype {
            DType::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            DType::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    Tensor::with_dtype(&dims, data, dtype).map_err(|e| crate::Error::Format(e.to_string()))
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"TBLB");
        assert_eq!(b[4..11], [1, 0, 2, 0, 0, 0, 0]);
        assert_eq!(u64::from_le_bytes(b[11..19].try_into().unwrap()), 2);
        assert_eq!(b.len(), 11 + 16 + 24);
    }

    #[test]
    fn truncated_and_corrupt_blobs_are_rejected() {
        let t = Tensor::new_f64(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = encode(&t);
        assert!(matches!(
            decode(&b[..b.len() - 1]),
            Err(crate::Error::Format(_))
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(crate::Error::Format(_))));
        let mut bad = b;
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(crate::Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..4),
            f64_mode in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut x = seed | 1;
            let data: Vec<f64> = (0..n).map(|_| {
                x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                f64::from_bits(x >> 2) // arbitrary finite-ish bit patterns
            }).map(|v| if v.is_finite() { v } else { 1.5 }).collect();
            let dtype = if f64_mode { DType::F64 } else { DType::F32 };
            let t = Tensor::with_dtype(&dims, data, dtype).unwrap();
            let bytes = encode(&t);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert_eq!(back, t);
        }
    }
}
