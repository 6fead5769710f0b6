//! Scalar abstraction shared by vectors, models and the optimizer.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A floating point type that can be carried in gradients and on the wire.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Encoded width in bytes.
    const WIRE_BYTES: usize;
    /// Distinguishes encodings of different widths (`b'1'` for f32).
    const WIRE_TAG: u8;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `WIRE_BYTES` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr) => {
        impl Scalar for $t {
            const WIRE_BYTES: usize = std::mem::size_of::<$t>();
            const WIRE_TAG: u8 = $tag;

            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, b'1');
impl_scalar!(f64, b'2');

/// Smallest `r` with `2^r >= n`; zero for `n <= 1`.
pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_small_values() {
        let got: Vec<u32> = (0..=9).map(ceil_log2).collect();
        assert_eq!(got, vec![0, 0, 1, 2, 2, 3, 3, 3, 3, 4]);
        assert_eq!(ceil_log2(32), 5);
        assert_eq!(ceil_log2(33), 6);
    }

    #[test]
    fn wire_roundtrip() {
        let mut out = Vec::new();
        (-1.5f32).write_le(&mut out);
        0.25f64.write_le(&mut out);
        assert_eq!(out.len(), 12);
        assert_eq!(f32::read_le(&out[..4]), -1.5);
        assert_eq!(f64::read_le(&out[4..]), 0.25);
    }
}
