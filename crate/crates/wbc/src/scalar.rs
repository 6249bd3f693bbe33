//! Scalar abstraction the numeric core is generic over.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps, NumCast};

/// Floating-point scalar: `f32` or `f64`.
///
/// Beyond the arithmetic surface of [`num_traits::Float`] this carries the
/// little-endian byte codec used by the tensor file format, so containers
/// round-trip bit-exactly in either precision.
pub trait Scalar: Float + NumAssignOps + Debug + Display + Send + Sync + 'static {
    /// Bytes per element; doubles as the element-width flag in tensor files.
    const ELEM_BYTES: u8;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decode one element from exactly `ELEM_BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// Conversion from `f64` for constants, config values and RNG draws.
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 value representable as scalar")
    }

    /// Widening conversion (named to avoid clashing with
    /// `ToPrimitive::to_f64`).
    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar converts to f64")
    }

    /// Conversion from a count (exact for every size this library handles).
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const ELEM_BYTES: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte element"))
    }
}

impl Scalar for f64 {
    const ELEM_BYTES: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte element"))
    }
}
