//! Floating-point abstraction so every algorithm runs at both precisions:
//! 32-bit for training throughput, 64-bit for verification.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
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
    /// Bytes per value in the checkpoint container.
    const BYTES: usize;
    /// Short tag written into checkpoints ("f32" / "f64").
    const NAME: &'static str;
    /// Max-abs tolerance for parallel-vs-sequential scan equivalence at this
    /// precision. Part of the test contract, not a runtime knob.
    const SCAN_TOL: f64;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Numerically stable `ln(1 + e^x)`.
    fn softplus(self) -> Self {
        self.maximum(Self::zero()) + (-self.abs()).exp().ln_1p()
    }

    /// Stable logistic sigmoid; the derivative of [`Scalar::softplus`].
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";
    const SCAN_TOL: f64 = 1e-4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn minimum(self, other: Self) -> Self {
        self.min(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";
    const SCAN_TOL: f64 = 1e-10;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn minimum(self, other: Self) -> Self {
        self.min(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Inverse of softplus: `x` such that `softplus(x) = y`, for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-((-y).exp())).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for i in -40..40 {
            let x = i as f64 * 0.5;
            let naive = (1.0 + x.exp()).ln();
            assert!((Scalar::softplus(x) - naive).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn softplus_stable_at_extremes() {
        assert!(Scalar::softplus(800.0_f64).is_finite());
        assert_eq!(Scalar::softplus(800.0_f64), 800.0);
        assert_eq!(Scalar::softplus(-800.0_f64), 0.0);
        assert!(Scalar::softplus(-800.0_f32).is_finite());
    }

    #[test]
    fn inv_softplus_round_trips() {
        for &y in &[1e-6, 1e-3, 0.1, 1.0, 10.0, 100.0] {
            let x = inv_softplus(y);
            assert!((Scalar::softplus(x) - y).abs() < 1e-12 * y.max(1.0), "y={y}");
        }
        // The unit process-noise init point.
        assert!((Scalar::softplus(inv_softplus(1.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_softplus_derivative() {
        let eps = 1e-6;
        for i in -20..20 {
            let x = i as f64 * 0.7;
            let fd = (Scalar::softplus(x + eps) - Scalar::softplus(x - eps)) / (2.0 * eps);
            assert!((Scalar::sigmoid(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
