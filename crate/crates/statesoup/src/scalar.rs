//! Floating-point abstraction for the recurrence engine.
//!
//! The model runs in one of two numeric modes: `f32` for production
//! (states are stored in 32-bit floats anyway) and `f64` for oracle-grade
//! paths such as finite-difference gradient checks, where 32-bit rounding
//! noise would swamp the quantity under test.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Clone
    + Debug
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f32(self) -> f32;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// exp() as used inside the transition-coefficient kernel. For f32 this
    /// is a polynomial approximation that the compiler can vectorize; for
    /// f64 it is the libm exp.
    fn kernel_exp(self) -> Self;

    /// Branch-free sigmoid on the same footing as `kernel_exp`.
    fn kernel_sigmoid(self) -> Self;

    /// Branch-free softplus on the same footing as `kernel_exp`.
    fn kernel_softplus(self) -> Self;
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;

    #[inline(always)]
    fn from_f32(v: f32) -> f32 {
        v
    }
    #[inline(always)]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> f32 {
        f32::ln(self)
    }
    #[inline(always)]
    fn ln_1p(self) -> f32 {
        f32::ln_1p(self)
    }
    #[inline(always)]
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    #[inline(always)]
    fn maxv(self, other: f32) -> f32 {
        f32::max(self, other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline(always)]
    fn kernel_exp(self) -> f32 {
        fast_exp_f32(self)
    }
    #[inline(always)]
    fn kernel_sigmoid(self) -> f32 {
        1.0 / (1.0 + fast_exp_f32(-self))
    }
    #[inline(always)]
    fn kernel_softplus(self) -> f32 {
        let e = fast_exp_f32(-self.abs());
        self.max(0.0) + fast_ln_1p_f32(e)
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    #[inline(always)]
    fn from_f32(v: f32) -> f64 {
        v as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    #[inline(always)]
    fn ln_1p(self) -> f64 {
        f64::ln_1p(self)
    }
    #[inline(always)]
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    #[inline(always)]
    fn maxv(self, other: f64) -> f64 {
        f64::max(self, other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline(always)]
    fn kernel_exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline(always)]
    fn kernel_sigmoid(self) -> f64 {
        sigmoid(self)
    }
    #[inline(always)]
    fn kernel_softplus(self) -> f64 {
        softplus(self)
    }
}

const LN2_HI: f32 = 0.693_359_375;
const LN2_LO: f32 = -2.121_944_4e-4;
const LOG2_E: f32 = std::f32::consts::LOG2_E;

/// Branch-free polynomial exp for f32, accurate to ~1e-7 relative over the
/// range the recurrence produces (arguments are always <= 0). Inputs are
/// clamped to [-87, 88], so extreme decays saturate at ~1e-38 rather than
/// flushing through denormals.
#[inline(always)]
pub fn fast_exp_f32(x: f32) -> f32 {
    // max/min and ties-even rounding lower to single branch-free SIMD
    // instructions; f32::clamp and f32::round would block vectorization
    let x = x.max(-87.0).min(88.0);
    let n = (x * LOG2_E).round_ties_even();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // degree-6 Taylor on |r| <= ln(2)/2; max relative error ~1.3e-8
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let bits = ((127 + n as i32) as u32) << 23;
    p * f32::from_bits(bits)
}

/// ln(1 + e) for e in [0, 1], via the odd atanh series on z = e/(2+e)
/// (z <= 1/3, truncation below 5e-8). Branch-free and vectorizable.
#[inline(always)]
pub fn fast_ln_1p_f32(e: f32) -> f32 {
    let z = e / (2.0 + e);
    let z2 = z * z;
    let s = 1.0
        + z2 * (1.0 / 3.0
            + z2 * (1.0 / 5.0 + z2 * (1.0 / 7.0 + z2 * (1.0 / 9.0 + z2 * (1.0 / 11.0)))));
    2.0 * z * s
}

/// Numerically stable softplus: ln(1 + e^x).
#[inline(always)]
pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::ZERO {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid.
#[inline(always)]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}
