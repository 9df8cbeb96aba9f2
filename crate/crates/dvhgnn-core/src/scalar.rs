use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type the numeric kernels are generic over.
///
/// Everything the engine needs beyond `num_traits::Float`: conversion from
/// f64 literals, compound assignment, summation, and thread-safety bounds so
/// buffers can be shared across worker threads.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Name written into serialized tensor manifests ("f32" or "f64").
    const DTYPE: &'static str;

    /// Little-endian byte width of one element.
    const BYTE_WIDTH: usize;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

/// Convert an f64 literal into the working scalar type.
///
/// Panics only if the target type cannot represent any f64, which neither
/// implementor can trigger; keeping the panic here spares call sites the
/// unwrap noise.
#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in Scalar")
}
