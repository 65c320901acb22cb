//! Element types the numeric core is generic over. Training runs in f32;
//! gradient verification and other high-precision checks run the same code
//! in f64. Precision is a property of a whole computation, never mixed
//! per-op: every kernel uses the element type's own arithmetic.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Array element tags used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    U16 = 3,
    U32 = 4,
    U64 = 5,
}

impl Dtype {
    pub fn from_tag(tag: u8) -> Option<Dtype> {
        Some(match tag {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::U8,
            3 => Dtype::U16,
            4 => Dtype::U32,
            5 => Dtype::U64,
            _ => return None,
        })
    }
}

pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    /// Gauss error function; both widths route through the f64 libm
    /// implementation so values agree across precisions.
    fn erf(self) -> Self;
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn is_finite(self) -> bool;

    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maxv(self, o: Self) -> Self {
        f32::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f32::min(self, o)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maxv(self, o: Self) -> Self {
        f64::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f64::min(self, o)
    }
}
