use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Which floating-point width a run computes in. Exactly one is active per
/// process run; the choice is carried by the `Scalar` type parameter so
/// mixing kinds is a type error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScalarKind {
    Training32,
    Verification64,
}

impl ScalarKind {
    pub fn tag(self) -> u32 {
        match self {
            ScalarKind::Training32 => 32,
            ScalarKind::Verification64 => 64,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            32 => Some(ScalarKind::Training32),
            64 => Some(ScalarKind::Verification64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            ScalarKind::Training32 => 4,
            ScalarKind::Verification64 => 8,
        }
    }
}

impl Display for ScalarKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ScalarKind::Training32 => "Training32",
            ScalarKind::Verification64 => "Verification64",
        };
        f.write_str(name)
    }
}

/// Floating-point element type of every tensor.
///
/// A computation is generic over one `Scalar`, so 32-bit and 64-bit values
/// cannot meet in one operation:
///
/// ```compile_fail
/// use bicnet::numerics::{matmul, Tensor};
/// let a = Tensor::<f32>::zeros(&[2, 2]);
/// let b = Tensor::<f64>::zeros(&[2, 2]);
/// let _ = matmul(&a, &b);
/// ```
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const KIND: ScalarKind;

    fn erf(self) -> Self;

    /// Little-endian bytes; `write_le`/`read_le` round-trip bit-exactly.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f32(v: f32) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const KIND: ScalarKind = ScalarKind::Training32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    const KIND: ScalarKind = ScalarKind::Verification64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    fn from_f32(v: f32) -> Self {
        v as f64
    }
}
