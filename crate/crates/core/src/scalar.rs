//! Element types and the scalar abstraction shared by the VM kernels and the
//! reference executor.

use std::fmt;
use std::str::FromStr;

use half::f16;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Floating-point compute type: `f32` or `f64`.
///
/// Every arithmetic kernel in the crate is written against this trait. The VM
/// picks `f32` for half-precision tensors and `f64` for everything wider; the
/// reference executor always runs in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// Lossless for `f64`, round-to-nearest for `f32`.
    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Storage type of a tensor element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F16,
    F32,
    I32,
    /// One byte per element, 0 or 1.
    Bool,
}

impl Dtype {
    pub const ALL: [Dtype; 4] = [Dtype::F16, Dtype::F32, Dtype::I32, Dtype::Bool];

    pub fn bytes(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::Bool => 1,
        }
    }

    /// Wire code used in bytecode records.
    pub fn code(self) -> u32 {
        match self {
            Dtype::F16 => 0,
            Dtype::F32 => 1,
            Dtype::I32 => 2,
            Dtype::Bool => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Dtype> {
        Some(match code {
            0 => Dtype::F16,
            1 => Dtype::F32,
            2 => Dtype::I32,
            3 => Dtype::Bool,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F16 => "f16",
            Dtype::F32 => "f32",
            Dtype::I32 => "i32",
            Dtype::Bool => "bool",
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Dtype::F16 | Dtype::F32)
    }

    /// Round a value to what this dtype can store.
    ///
    /// Half precision rounds to nearest-even; integers truncate toward zero and
    /// saturate; booleans map nonzero to 1.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Dtype::F16 => f16::from_f64(v).to_f64(),
            Dtype::F32 => v as f32 as f64,
            Dtype::I32 => {
                if v.is_nan() {
                    0.0
                } else {
                    (v.trunc() as i32) as f64
                }
            }
            Dtype::Bool => {
                if v != 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Decode one little-endian element.
    #[inline]
    pub fn read(self, bytes: &[u8]) -> f64 {
        match self {
            Dtype::F16 => f16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
            Dtype::F32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
            Dtype::I32 => i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
            Dtype::Bool => bytes[0] as f64,
        }
    }

    /// Encode one element little-endian, quantizing first.
    #[inline]
    pub fn write(self, bytes: &mut [u8], v: f64) {
        match self {
            Dtype::F16 => bytes[..2].copy_from_slice(&f16::from_f64(v).to_le_bytes()),
            Dtype::F32 => bytes[..4].copy_from_slice(&(v as f32).to_le_bytes()),
            Dtype::I32 => {
                let q = self.quantize(v) as i32;
                bytes[..4].copy_from_slice(&q.to_le_bytes());
            }
            Dtype::Bool => bytes[0] = (v != 0.0) as u8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f16" | "float16" => Ok(Dtype::F16),
            "f32" | "float32" => Ok(Dtype::F32),
            "i32" | "int32" => Ok(Dtype::I32),
            "bool" | "u8" => Ok(Dtype::Bool),
            other => Err(format!("unknown dtype `{other}`")),
        }
    }
}
