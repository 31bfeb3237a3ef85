//! Double-double arithmetic (about 106 significant bits), used as a
//! high-precision evaluator for finite-difference gradient checks.
//!
//! A value is the unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
//! Addition, multiplication, division, `sqrt`, `exp`, `exp_m1`, `tanh` and
//! `ln` are accurate to a few units of `2^-104`. Trigonometric and the
//! remaining transcendental functions fall back to `f64` precision.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, Num, NumCast, One, ToPrimitive, Zero};

use super::matrix::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.3190468138462996e-17 };
const LN10: Dd = Dd { hi: std::f64::consts::LN_10, lo: -2.1707562233822494e-16 };

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    pub const fn of(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Self { hi, lo: 0.0 };
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    fn scale_pow2(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Self { hi: self.hi * s, lo: self.lo * s }
    }

    /// `exp(r) − 1` for `|r| <= 0.36`: Taylor series on `r / 1024`, then ten
    /// doublings through `expm1(2x) = expm1(x)·(expm1(x) + 2)`.
    fn expm1_reduced(r: Self) -> Self {
        let s = r.scale_pow2(-10);
        let mut term = s;
        let mut sum = s;
        for n in 2..30 {
            term = term * s / Dd::of(n as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-36 * sum.hi.abs().max(1e-300) {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum * (sum + Dd::of(2.0));
        }
        sum
    }

    fn sign(self) -> f64 {
        if self.hi < 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Self::of(x)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl fmt::Display for Dd {
    /// Shows the leading `f64`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
    }
}

impl Neg for Dd {
    type Output = Self;
    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (s1, s2) = two_sum(self.hi, o.hi);
        if !s1.is_finite() {
            return Self::of(s1);
        }
        let (t1, t2) = two_sum(self.lo, o.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Self::renorm(s1, s2 + t2)
    }
}

impl Sub for Dd {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let (p1, p2) = two_prod(self.hi, o.hi);
        if !p1.is_finite() {
            return Self::of(p1);
        }
        Self::renorm(p1, p2 + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        if !q1.is_finite() || q1 == 0.0 {
            return Self::of(q1);
        }
        let r = self - o * Self::of(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Self::of(q2);
        let q3 = r.hi / o.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Self { hi: q1, lo: q2 } + Self::of(q3)
    }
}

impl Rem for Dd {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        self - (self / o).trunc() * o
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Self::of(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Self::of(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::of)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.hi.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.hi.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Self::of)
    }
}

impl Float for Dd {
    fn nan() -> Self {
        Self::of(f64::NAN)
    }
    fn infinity() -> Self {
        Self::of(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::of(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::of(-0.0)
    }
    fn min_value() -> Self {
        Self::of(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::of(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Self::of(2f64.powi(-104))
    }
    fn max_value() -> Self {
        Self::of(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let h = self.hi.floor();
        if h == self.hi {
            Self::renorm(h, self.lo.floor())
        } else {
            Self::of(h)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        (self + Self::of(0.5)).floor()
    }
    fn trunc(self) -> Self {
        if self.hi < 0.0 {
            self.ceil()
        } else {
            self.floor()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::of(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::of(self.hi.sqrt());
        }
        let y = Self::of(self.hi.sqrt());
        y + (self - y * y) / (y + y)
    }
    fn exp(self) -> Self {
        if self.hi.is_nan() {
            return self;
        }
        if self.hi > 709.78 {
            return Self::infinity();
        }
        if self.hi < -745.2 {
            return Self::zero();
        }
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2 * Self::of(k);
        (Self::expm1_reduced(r) + Self::one()).scale_pow2(k as i32)
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::of(self.hi.ln());
        }
        let y = Self::of(self.hi.ln());
        y + self * (-y).exp() - Self::one()
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / LN10
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        Self::of(self.hi.cbrt())
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        Self::of(self.hi.sin())
    }
    fn cos(self) -> Self {
        Self::of(self.hi.cos())
    }
    fn tan(self) -> Self {
        Self::of(self.hi.tan())
    }
    fn asin(self) -> Self {
        Self::of(self.hi.asin())
    }
    fn acos(self) -> Self {
        Self::of(self.hi.acos())
    }
    fn atan(self) -> Self {
        Self::of(self.hi.atan())
    }
    fn atan2(self, other: Self) -> Self {
        Self::of(self.hi.atan2(other.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        if self.hi.abs() <= 0.34 {
            Self::expm1_reduced(self)
        } else {
            self.exp() - Self::one()
        }
    }
    fn ln_1p(self) -> Self {
        (self + Self::one()).ln()
    }
    fn sinh(self) -> Self {
        let e = self.exp();
        (e - e.recip()) / Self::of(2.0)
    }
    fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()) / Self::of(2.0)
    }
    /// `tanh|x| = t / (t + 2)` with `t = expm1(2|x|)`.
    fn tanh(self) -> Self {
        if self.hi.is_nan() {
            return self;
        }
        let a = self.abs();
        if a.hi > 40.0 {
            return Self::of(self.sign());
        }
        let t = (a + a).exp_m1();
        let y = t / (t + Self::of(2.0));
        if self.hi < 0.0 {
            -y
        } else {
            y
        }
    }
    fn asinh(self) -> Self {
        Self::of(self.hi.asinh())
    }
    fn acosh(self) -> Self {
        Self::of(self.hi.acosh())
    }
    fn atanh(self) -> Self {
        Self::of(self.hi.atanh())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Real for Dd {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Self::of(x)
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self.hi + self.lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Relative distance in units of `2^-100`.
    fn close(x: Dd, hi: f64, lo: f64) -> f64 {
        let d = (x - Dd::new(hi, lo)).abs();
        (d / Dd::new(hi, lo).abs()).as_f64() * 2f64.powi(100)
    }

    #[test]
    fn arithmetic_is_error_free() {
        let a = Dd::of(1.0) + Dd::of(1e-20);
        assert_eq!((a - Dd::of(1.0)).as_f64(), 1e-20);
        let third = Dd::of(1.0) / Dd::of(3.0);
        assert!(close(third, 0.3333333333333333, 1.850371707708594e-17) < 4.0);
        assert!(close(third * Dd::of(3.0), 1.0, 0.0) < 4.0);
        let s = Dd::of(2.0).sqrt();
        assert!(close(s, std::f64::consts::SQRT_2, -9.667293313452913e-17) < 4.0);
    }

    #[test]
    fn transcendentals_match_references() {
        assert!(close(Dd::of(1.0).exp(), std::f64::consts::E, 1.4456468917292502e-16) < 16.0);
        assert!(close(Dd::of(-3.7).exp(), 0.024723526470339388, -1.294857794723138e-18) < 16.0);
        assert!(close(Dd::of(10.25).exp(), 28282.541920334977, 1.6137346351068288e-12) < 16.0);
        assert!(close(Dd::of(1e-5).exp_m1(), 1.0000050000166668e-05, -3.111926571619883e-22) < 16.0);
        assert!(close(Dd::of(0.5).tanh(), 0.46211715726000974, 2.1916603238260928e-17) < 16.0);
        assert!(close(Dd::of(-0.001).tanh(), -0.0009999996666668, -1.7800613799166557e-20) < 16.0);
        assert!(close(Dd::of(7.5).tanh(), 0.9999993881955461, 2.4847492783280624e-17) < 16.0);
        assert!(close(Dd::of(10.0).ln(), std::f64::consts::LN_10, -2.1707562233822494e-16) < 16.0);
    }

    #[test]
    fn exp_ln_round_trip() {
        for x in [1e-3, 0.37, 2.0, 55.5, 1e6] {
            let v = Dd::of(x) + Dd::of(x * 1e-18);
            assert!(close(v.ln().exp(), v.hi, v.lo) < 64.0, "{x}");
        }
    }

    #[test]
    fn ordering_and_limits() {
        assert!(Dd::new(1.0, 1e-20) > Dd::of(1.0));
        assert_eq!(Dd::of(800.0).exp(), Dd::infinity());
        assert_eq!(Dd::of(-800.0).exp(), Dd::zero());
        assert_eq!(Dd::of(50.0).tanh(), Dd::one());
        assert_eq!(Dd::neg_infinity().max(Dd::of(-3.0)), Dd::of(-3.0));
        assert_eq!(Dd::of(-2.5).floor(), Dd::of(-3.0));
        assert_eq!(Dd::of(3.0).powi(-2).as_f64(), 1.0 / 9.0);
    }
}
