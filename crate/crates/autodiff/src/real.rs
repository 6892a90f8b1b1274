//! Scalar abstraction for code that must run both on plain `f64` and on
//! forward-mode dual numbers.
//!
//! Loss functions are written once against [`Real`]; evaluating them on
//! [`Dual`] yields exact directional derivatives, and nesting duals
//! (`Dual<Dual<f64, 1>, N>`) yields mixed second derivatives.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    /// Primal value, used for branching.
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn atan(self) -> Self;
    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }
    fn max(self, other: Self) -> Self {
        if other.value() > self.value() {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other.value() < self.value() {
            other
        } else {
            self
        }
    }
    fn square(self) -> Self {
        self * self
    }
    /// Clamp the primal into `[lo, hi]`; clamped values carry zero derivative.
    fn clamp(self, lo: f64, hi: f64) -> Self {
        let v = self.value();
        if v < lo {
            Self::cst(lo)
        } else if v > hi {
            Self::cst(hi)
        } else {
            self
        }
    }
    fn sigmoid(self) -> Self {
        // Branch on the sign to keep exp() bounded.
        if self.value() >= 0.0 {
            (((-self).exp()) + 1.0).recip()
        } else {
            let e = self.exp();
            e / (e + 1.0)
        }
    }
    /// `ln(sigmoid(x))`, stable for large `|x|`.
    fn log_sigmoid(self) -> Self {
        if self.value() >= 0.0 {
            -(((-self).exp()) + 1.0).ln()
        } else {
            self - (self.exp() + 1.0).ln()
        }
    }
    fn recip(self) -> Self {
        Self::cst(1.0) / self
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
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
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
}

/// Forward-mode dual number carrying `N` tangent components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T, const N: usize> {
    pub re: T,
    pub eps: [T; N],
}

impl<T: Real, const N: usize> Dual<T, N> {
    pub fn constant(re: T) -> Self {
        Self {
            re,
            eps: [T::cst(0.0); N],
        }
    }

    /// Seed the `k`-th tangent direction.
    pub fn variable(re: T, k: usize) -> Self {
        let mut d = Self::constant(re);
        d.eps[k] = T::cst(1.0);
        d
    }

    /// Chain rule for a unary function with value `f` and derivative `df`.
    fn chain(self, f: T, df: T) -> Self {
        Self {
            re: f,
            eps: self.eps.map(|e| e * df),
        }
    }
}

/// Seed `N` independent variables from plain values.
pub fn seed<const N: usize>(x: [f64; N]) -> [Dual<f64, N>; N] {
    std::array::from_fn(|k| Dual::variable(x[k], k))
}

impl<T: Real, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            re: self.re + o.re,
            eps: std::array::from_fn(|k| self.eps[k] + o.eps[k]),
        }
    }
}

impl<T: Real, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            re: self.re - o.re,
            eps: std::array::from_fn(|k| self.eps[k] - o.eps[k]),
        }
    }
}

impl<T: Real, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            re: self.re * o.re,
            eps: std::array::from_fn(|k| self.eps[k] * o.re + self.re * o.eps[k]),
        }
    }
}

impl<T: Real, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = T::cst(1.0) / o.re;
        let q = self.re * inv;
        Self {
            re: q,
            eps: std::array::from_fn(|k| (self.eps[k] - q * o.eps[k]) * inv),
        }
    }
}

impl<T: Real, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            re: -self.re,
            eps: self.eps.map(|e| -e),
        }
    }
}

impl<T: Real, const N: usize> Add<f64> for Dual<T, N> {
    type Output = Self;
    fn add(self, o: f64) -> Self {
        Self {
            re: self.re + o,
            eps: self.eps,
        }
    }
}

impl<T: Real, const N: usize> Sub<f64> for Dual<T, N> {
    type Output = Self;
    fn sub(self, o: f64) -> Self {
        Self {
            re: self.re - o,
            eps: self.eps,
        }
    }
}

impl<T: Real, const N: usize> Mul<f64> for Dual<T, N> {
    type Output = Self;
    fn mul(self, o: f64) -> Self {
        Self {
            re: self.re * o,
            eps: self.eps.map(|e| e * o),
        }
    }
}

impl<T: Real, const N: usize> Div<f64> for Dual<T, N> {
    type Output = Self;
    fn div(self, o: f64) -> Self {
        Self {
            re: self.re / o,
            eps: self.eps.map(|e| e / o),
        }
    }
}

impl<T: Real, const N: usize> Real for Dual<T, N> {
    fn cst(v: f64) -> Self {
        Self::constant(T::cst(v))
    }
    fn value(self) -> f64 {
        self.re.value()
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), T::cst(1.0) / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::cst(0.5) / s)
    }
    fn powf(self, p: f64) -> Self {
        if p == 0.0 {
            return Self::cst(1.0);
        }
        let d = if self.re.value() == 0.0 {
            // x^p is flat at 0 for p > 1 and its one-sided slope diverges for
            // p < 1; callers only reach 0 where the base is locally constant.
            T::cst(if p == 1.0 { 1.0 } else { 0.0 })
        } else {
            self.re.powf(p - 1.0) * p
        };
        self.chain(self.re.powf(p), d)
    }
    fn atan(self) -> Self {
        let d = T::cst(1.0) / (self.re * self.re + 1.0);
        self.chain(self.re.atan(), d)
    }
}
