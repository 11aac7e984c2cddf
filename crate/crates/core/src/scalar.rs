//! Generic scalars for expression evaluation and integration.
//!
//! Everything downstream of the expression evaluator is written against
//! [`Scalar`], so the same code path runs on plain `f64` and on nested
//! forward-mode dual numbers. Nesting `Dual<Dual<…>>` four deep yields
//! exact univariate Taylor coefficients up to fourth order, which is what
//! jet estimation of variation curves needs.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic contract shared by `f64` and the dual number tower.
pub trait Scalar:
    Clone
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;

    /// Innermost real part.
    fn value(&self) -> f64;

    /// True when every component (real and all infinitesimal parts) is zero.
    fn is_exact_zero(&self) -> bool;

    /// True when every component is finite.
    fn all_finite(&self) -> bool;

    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn powi(&self, n: i32) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn scale(&self, k: f64) -> Self {
        self.clone() * Self::from_f64(k)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(&self) -> f64 {
        *self
    }
    fn is_exact_zero(&self) -> bool {
        *self == 0.0
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
    fn scale(&self, k: f64) -> Self {
        self * k
    }
}

/// First-order dual number `re + du·ε` with `ε² = 0`, over any inner scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub du: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, du: T) -> Self {
        Dual { re, du }
    }

    pub fn constant(re: T) -> Self {
        Dual { re, du: T::zero() }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Dual::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Dual::new(self.re - rhs.re, self.du - rhs.du)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let du = self.re.clone() * rhs.du + self.du * rhs.re.clone();
        Dual::new(self.re * rhs.re, du)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.re / rhs.re.clone();
        let du = (self.du - q.clone() * rhs.du) / rhs.re;
        Dual::new(q, du)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.du)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn from_f64(x: f64) -> Self {
        Dual::constant(T::from_f64(x))
    }
    fn value(&self) -> f64 {
        self.re.value()
    }
    fn is_exact_zero(&self) -> bool {
        self.re.is_exact_zero() && self.du.is_exact_zero()
    }
    fn all_finite(&self) -> bool {
        self.re.all_finite() && self.du.all_finite()
    }
    fn sin(&self) -> Self {
        Dual::new(self.re.sin(), self.du.clone() * self.re.cos())
    }
    fn cos(&self) -> Self {
        Dual::new(self.re.cos(), -(self.du.clone() * self.re.sin()))
    }
    fn exp(&self) -> Self {
        let e = self.re.exp();
        Dual::new(e.clone(), self.du.clone() * e)
    }
    fn ln(&self) -> Self {
        Dual::new(self.re.ln(), self.du.clone() / self.re.clone())
    }
    fn sqrt(&self) -> Self {
        let r = self.re.sqrt();
        let du = self.du.clone() / r.scale(2.0);
        Dual::new(r, du)
    }
    fn powi(&self, n: i32) -> Self {
        match n {
            0 => Self::one(),
            1 => self.clone(),
            _ => {
                let lower = self.re.powi(n - 1);
                let du = self.du.clone() * lower.scale(n as f64);
                Dual::new(lower * self.re.clone(), du)
            }
        }
    }
    fn scale(&self, k: f64) -> Self {
        Dual::new(self.re.scale(k), self.du.scale(k))
    }
}

/// Scalars that can seed a univariate Taylor expansion.
///
/// `variable(x)` builds the independent variable at `x` with every nesting
/// level seeded, and `derivatives()` reads back `[f, f', f'', …]` up to the
/// nesting depth.
pub trait Taylor: Scalar {
    const ORDER: usize;
    fn variable(x: f64) -> Self;
    fn derivatives(&self) -> Vec<f64>;
}

impl Taylor for f64 {
    const ORDER: usize = 0;
    fn variable(x: f64) -> Self {
        x
    }
    fn derivatives(&self) -> Vec<f64> {
        vec![*self]
    }
}

impl<T: Taylor> Taylor for Dual<T> {
    const ORDER: usize = T::ORDER + 1;
    fn variable(x: f64) -> Self {
        Dual::new(T::variable(x), T::one())
    }
    fn derivatives(&self) -> Vec<f64> {
        let mut out = vec![self.re.value()];
        out.extend(self.du.derivatives());
        out
    }
}

pub type Dual1 = Dual<f64>;
pub type Dual2 = Dual<Dual1>;
pub type Dual3 = Dual<Dual2>;
/// Fourth-order Taylor carrier.
pub type Dual4 = Dual<Dual3>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_order_product_rule() {
        let x = Dual1::variable(3.0);
        let y = x.clone() * x;
        assert_eq!(y.re, 9.0);
        assert_eq!(y.du, 6.0);
    }

    #[test]
    fn nested_second_derivative_of_cube() {
        let x = Dual2::variable(0.7);
        let d = x.powi(3).derivatives();
        assert_eq!(d.len(), 3);
        assert!((d[1] - 3.0 * 0.49).abs() < 1e-12);
        assert!((d[2] - 6.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn fourth_order_exp_and_trig() {
        let x = Dual4::variable(0.3);
        let e = x.exp().derivatives();
        for d in &e {
            assert!((d - 0.3f64.exp()).abs() < 1e-12);
        }
        let s = x.sin().derivatives();
        let expect = [0.3f64.sin(), 0.3f64.cos(), -0.3f64.sin(), -0.3f64.cos(), 0.3f64.sin()];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quotient_sqrt_and_log() {
        let x = Dual2::variable(2.0);
        let f = (Dual2::one() / x.clone()).derivatives();
        assert!((f[1] + 0.25).abs() < 1e-15);
        assert!((f[2] - 0.25).abs() < 1e-15);
        let g = x.sqrt().derivatives();
        assert!((g[1] - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        let h = x.ln().derivatives();
        assert!((h[2] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn exact_zero_checks_all_parts() {
        let z = Dual2::new(Dual1::new(0.0, 0.0), Dual1::new(0.0, 1e-300));
        assert!(!z.is_exact_zero());
        assert!(Dual2::zero().is_exact_zero());
    }
}
