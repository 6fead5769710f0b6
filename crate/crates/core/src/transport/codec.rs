//! Sparse-vector wire encoding.
//!
//! ```text
//! magic   u32   0x67544B31 for f32 values ("gTK1"), 0x67544B32 for f64
//! n       u64   entry count
//! indices n * u64, strictly ascending
//! values  n * f32 (or f64)
//! ```
//!
//! All fields little-endian.

use crate::error::{protocol, Result};
use crate::scalar::Scalar;
use crate::sparse_grad::{validate_indices, SparseVector};

const MAGIC_BASE: u32 = 0x6754_4B00;
pub const HEADER_BYTES: usize = 12;

pub fn sparse_magic<T: Scalar>() -> u32 {
    MAGIC_BASE | T::WIRE_TAG as u32
}

/// Encoded size of a sparse vector holding `n` entries.
pub fn encoded_len<T: Scalar>(n: usize) -> usize {
    HEADER_BYTES + n * (8 + T::WIRE_BYTES)
}

pub fn encode_sparse<T: Scalar>(s: &SparseVector<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len::<T>(s.nnz()));
    encode_sparse_into(s, &mut out);
    out
}

pub fn encode_sparse_into<T: Scalar>(s: &SparseVector<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(&sparse_magic::<T>().to_le_bytes());
    out.extend_from_slice(&(s.nnz() as u64).to_le_bytes());
    for &i in s.indices() {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for &v in s.values() {
        v.write_le(out);
    }
}

pub fn decode_sparse<T: Scalar>(bytes: &[u8], dim: usize) -> Result<SparseVector<T>> {
    if bytes.len() < HEADER_BYTES {
        return Err(protocol(format!(
            "sparse buffer truncated: {} bytes, header needs {HEADER_BYTES}",
            bytes.len()
        )));
    }
    let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != sparse_magic::<T>() {
        return Err(protocol(format!("bad sparse magic {magic:#010x}")));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let per_entry = 8 + T::WIRE_BYTES as u64;
    let body = (bytes.len() - HEADER_BYTES) as u64;
    if n.checked_mul(per_entry) != Some(body) {
        return Err(protocol(format!(
            "sparse buffer length {} inconsistent with {n} entries",
            bytes.len()
        )));
    }
    let n = n as usize;
    let idx_end = HEADER_BYTES + 8 * n;
    let indices: Vec<u64> = bytes[HEADER_BYTES..idx_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    validate_indices(dim, &indices).map_err(crate::error::Error::Protocol)?;
    let values = bytes[idx_end..]
        .chunks_exact(T::WIRE_BYTES)
        .map(T::read_le)
        .collect();
    Ok(SparseVector::from_parts_unchecked(dim, indices, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    #[test]
    fn empty_is_twelve_bytes() {
        let bytes = encode_sparse(&SparseVector::<f32>::empty(9));
        assert_eq!(bytes, [0x31, 0x4B, 0x54, 0x67, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn single_entry_layout() {
        let s = SparseVector::new(4, vec![1], vec![2.0f32]).unwrap();
        let bytes = encode_sparse(&s);
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[4..12], &1u64.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..24], &2.0f32.to_le_bytes());
        assert_eq!(decode_sparse::<f32>(&bytes, 4).unwrap(), s);
    }

    #[test]
    fn decode_errors() {
        let s = SparseVector::new(8, vec![1, 5], vec![2.0f32, -1.0]).unwrap();
        let good = encode_sparse(&s);

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(decode_sparse::<f32>(&bad_magic, 8), Err(Error::Protocol(_))));

        assert!(matches!(decode_sparse::<f32>(&good[..good.len() - 1], 8), Err(Error::Protocol(_))));
        assert!(matches!(decode_sparse::<f32>(&good[..7], 8), Err(Error::Protocol(_))));

        // index 5 is out of range for dim 5
        assert!(matches!(decode_sparse::<f32>(&good, 5), Err(Error::Protocol(_))));

        let mut swapped = good.clone();
        swapped[12..20].copy_from_slice(&7u64.to_le_bytes());
        assert!(matches!(decode_sparse::<f32>(&swapped, 8), Err(Error::Protocol(_))));

        // f64 decoder refuses f32 payload
        assert!(decode_sparse::<f64>(&good, 8).is_err());
    }

    fn arb_sparse() -> impl Strategy<Value = SparseVector<f32>> {
        (1usize..200).prop_flat_map(|dim| {
            proptest::collection::btree_map(0..dim as u64, -1e6f32..1e6, 0..dim.min(40))
                .prop_map(move |m| {
                    let (i, v) = m.into_iter().unzip();
                    SparseVector::new(dim, i, v).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip(s in arb_sparse()) {
            let bytes = encode_sparse(&s);
            prop_assert_eq!(bytes.len(), encoded_len::<f32>(s.nnz()));
            prop_assert_eq!(decode_sparse::<f32>(&bytes, s.dim()).unwrap(), s);
        }
    }
}
