//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64`s with
//! about 106 bits of mantissa.
//!
//! Used as the reference precision of finite-difference gradient checks, where
//! plain `f64` round-off (`ε·|f| / h`) would swamp small gradients. Addition,
//! multiplication, division, `sqrt`, `exp`, `ln` and the hyperbolic functions
//! are computed to full double-double accuracy; trigonometric and the other
//! rarely needed functions fall back to `f64` precision.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};
use std::sync::OnceLock;

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::tensor::Scalar;

#[derive(Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

/// `1/k!` for `k = 0..=12`.
fn inverse_factorials() -> &'static [DoubleDouble; 13] {
    static TABLE: OnceLock<[DoubleDouble; 13]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [DoubleDouble::one(); 13];
        for k in 1..t.len() {
            t[k] = t[k - 1] / DoubleDouble::from_f64(k as f64);
        }
        t
    })
}

const EXP_STEPS: i32 = 23;

/// `exp(j/64)` for `j = −23..=23`, indexed by `j + 23`.
fn exp_table() -> &'static [DoubleDouble; 47] {
    static TABLE: OnceLock<[DoubleDouble; 47]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [DoubleDouble::one(); 47];
        for (i, e) in t.iter_mut().enumerate() {
            let x = DoubleDouble::from_f64((i as i32 - EXP_STEPS) as f64 / 64.0);
            *e = x.expm1_doubling() + DoubleDouble::one();
        }
        t
    })
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub const fn from_f64(x: f64) -> Self {
        DoubleDouble { hi: x, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return DoubleDouble { hi, lo: 0.0 };
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        DoubleDouble { hi, lo }
    }

    fn mul_pow2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        DoubleDouble {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    /// `exp(x) − 1` by its Taylor polynomial; accurate for `|x| ≤ 1/128`.
    /// Terms from `x⁷` on are below 4e-19 and summed in plain `f64`.
    fn expm1_poly(self) -> Self {
        let c = inverse_factorials();
        let tail = c[7..].iter().rev().fold(0.0, |acc, k| acc * self.hi + k.hi);
        let mut acc = DoubleDouble::from_f64(tail);
        for k in (1..7).rev() {
            acc = acc * self + c[k];
        }
        acc * self
    }

    /// `exp(x) − 1` for `|x| ≤ 1` by ten applications of
    /// `e(2y) = 2·e(y) + e(y)²` from `x / 2^10`. Slow; builds the table.
    fn expm1_doubling(self) -> Self {
        let mut s = self.mul_pow2(-10).expm1_poly();
        for _ in 0..10 {
            s = s.mul_pow2(1) + s * s;
        }
        s
    }
}

impl fmt::Debug for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DoubleDouble({:e} + {:e})", self.hi, self.lo)
    }
}

impl fmt::Display for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        DoubleDouble {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        if !s.is_finite() {
            return DoubleDouble::from_f64(s);
        }
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        DoubleDouble::renorm(s, e + f)
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        if !p.is_finite() {
            return DoubleDouble::from_f64(p);
        }
        DoubleDouble::renorm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() || b.hi == 0.0 {
            return DoubleDouble::from_f64(q1);
        }
        let r = self - b * DoubleDouble::from_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * DoubleDouble::from_f64(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        DoubleDouble { hi: q1, lo: q2 } + DoubleDouble::from_f64(q3)
    }
}

impl Rem for DoubleDouble {
    type Output = Self;
    fn rem(self, b: Self) -> Self {
        self - (self / b).trunc() * b
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl $tr for DoubleDouble {
            fn $m(&mut self, b: Self) {
                *self = *self $op b;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /);

impl Zero for DoubleDouble {
    fn zero() -> Self {
        DoubleDouble::from_f64(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for DoubleDouble {
    fn one() -> Self {
        DoubleDouble::from_f64(1.0)
    }
}

impl Num for DoubleDouble {
    type FromStrRadixErr = std::num::ParseFloatError;
    fn from_str_radix(s: &str, _radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        s.parse::<f64>().map(DoubleDouble::from_f64)
    }
}

impl ToPrimitive for DoubleDouble {
    fn to_i64(&self) -> Option<i64> {
        (self.hi + self.lo).to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        (self.hi + self.lo).to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for DoubleDouble {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        let lo = (n - hi as i64) as f64;
        Some(DoubleDouble::renorm(hi, lo))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        let lo = n.wrapping_sub(hi as u64) as i64 as f64;
        Some(DoubleDouble::renorm(hi, lo))
    }
    fn from_f64(x: f64) -> Option<Self> {
        Some(DoubleDouble::from_f64(x))
    }
    fn from_f32(x: f32) -> Option<Self> {
        Some(DoubleDouble::from_f64(x as f64))
    }
}

impl NumCast for DoubleDouble {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(DoubleDouble::from_f64)
    }
}

/// Applies an `f64` function to the leading component.
fn approx(x: DoubleDouble, f: impl Fn(f64) -> f64) -> DoubleDouble {
    DoubleDouble::from_f64(f(x.hi))
}

impl Float for DoubleDouble {
    fn nan() -> Self {
        DoubleDouble::from_f64(f64::NAN)
    }
    fn infinity() -> Self {
        DoubleDouble::from_f64(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        DoubleDouble::from_f64(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        DoubleDouble::from_f64(-0.0)
    }
    fn min_value() -> Self {
        DoubleDouble::from_f64(f64::MIN)
    }
    fn min_positive_value() -> Self {
        DoubleDouble::from_f64(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        DoubleDouble::from_f64(f64::EPSILON * f64::EPSILON)
    }
    fn max_value() -> Self {
        DoubleDouble::from_f64(f64::MAX)
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
        let hi = self.hi.floor();
        if hi == self.hi {
            DoubleDouble::renorm(hi, self.lo.floor())
        } else {
            DoubleDouble::from_f64(hi)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        if self.hi >= 0.0 {
            (self + DoubleDouble::from_f64(0.5)).floor()
        } else {
            -((-self) + DoubleDouble::from_f64(0.5)).floor()
        }
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
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
        DoubleDouble::from_f64(self.hi.signum())
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
        let mut k = n.unsigned_abs();
        let mut acc = Self::one();
        while k > 0 {
            if k & 1 == 1 {
                acc *= base;
            }
            base *= base;
            k >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (self.ln() * n).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return DoubleDouble::from_f64(self.hi.sqrt());
        }
        let x = 1.0 / self.hi.sqrt();
        let ax = DoubleDouble::from_f64(self.hi * x);
        let diff = (self - ax * ax).hi * (x * 0.5);
        ax + DoubleDouble::from_f64(diff)
    }
    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Self::infinity();
        }
        if self.hi < -745.0 {
            return Self::zero();
        }
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2 * DoubleDouble::from_f64(k);
        // exp(r) = exp(j/64) · exp(r − j/64)
        let j = (r.hi * 64.0)
            .round()
            .clamp(-EXP_STEPS as f64, EXP_STEPS as f64);
        let e = exp_table()[(j as i32 + EXP_STEPS) as usize];
        let rest = r - DoubleDouble::from_f64(j / 64.0);
        (e + e * rest.expm1_poly()).mul_pow2(k as i32)
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return DoubleDouble::from_f64(self.hi.ln());
        }
        // one Newton step on exp(y) = x doubles the precision of ln(hi)
        let y = DoubleDouble::from_f64(self.hi.ln());
        y + self * (-y).exp() - Self::one()
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / DoubleDouble::from_f64(10.0).ln()
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
        approx(self, f64::cbrt)
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        approx(self, f64::sin)
    }
    fn cos(self) -> Self {
        approx(self, f64::cos)
    }
    fn tan(self) -> Self {
        approx(self, f64::tan)
    }
    fn asin(self) -> Self {
        approx(self, f64::asin)
    }
    fn acos(self) -> Self {
        approx(self, f64::acos)
    }
    fn atan(self) -> Self {
        approx(self, f64::atan)
    }
    fn atan2(self, other: Self) -> Self {
        DoubleDouble::from_f64(self.hi.atan2(other.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        if self.hi.abs() <= 1.0 / 128.0 {
            self.expm1_poly()
        } else {
            self.exp() - Self::one()
        }
    }
    fn ln_1p(self) -> Self {
        (Self::one() + self).ln()
    }
    fn sinh(self) -> Self {
        let e = self.exp_m1();
        // (e^x − e^−x) / 2 with e^x = 1 + e
        (e + e / (e + Self::one())).mul_pow2(-1)
    }
    fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()).mul_pow2(-1)
    }
    fn tanh(self) -> Self {
        if self.hi.abs() <= 0.5 {
            let e = self.mul_pow2(1).exp_m1();
            return e / (e + DoubleDouble::from_f64(2.0));
        }
        let t = (-self.abs().mul_pow2(1)).exp();
        let mag = (Self::one() - t) / (Self::one() + t);
        if self.hi < 0.0 {
            -mag
        } else {
            mag
        }
    }
    fn asinh(self) -> Self {
        approx(self, f64::asinh)
    }
    fn acosh(self) -> Self {
        approx(self, f64::acosh)
    }
    fn atanh(self) -> Self {
        approx(self, f64::atanh)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for DoubleDouble {
    fn name() -> &'static str {
        "double-double"
    }
}
