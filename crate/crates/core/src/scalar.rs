//! Element type abstraction for the numeric core.
//!
//! Training defaults to `f32`; gradient checking instantiates the same code
//! at `f64` so analytic gradients can be compared against central
//! differences well below f32 noise. Every op in the crate is written once,
//! generic over [`Scalar`].

use std::fmt::Debug;

/// Payload element dtype, recorded in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

pub trait Scalar:
    num_traits::Float + Debug + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Smallest positive normal value, used to floor underflowing softmax
    /// entries so probabilities stay strictly positive.
    fn min_positive() -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn min_positive() -> Self {
        f32::MIN_POSITIVE
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn min_positive() -> Self {
        f64::MIN_POSITIVE
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}
