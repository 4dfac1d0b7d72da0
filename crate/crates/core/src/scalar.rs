//! Scalar abstractions.
//!
//! Polynomial coefficients are generic over [`Coefficient`], which covers exact
//! rationals as well as `f32`/`f64`. Evaluation is generic over [`Real`].

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, NumCast, One, ToPrimitive, Zero};

/// Floating point type used for evaluation: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + NumCast + Debug + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Coefficient ring for polynomials: exact rationals or floats.
pub trait Coefficient:
    Clone
    + Debug
    + PartialEq
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    fn from_bigint(v: &BigInt) -> Self;

    fn to_f64(&self) -> f64;

    /// Parses `"3"`, `"-1.25"`, `"2e-3"`, or (exact types only) `"1/3"`.
    fn parse_coefficient(s: &str) -> Option<Self>;

    /// Canonical textual form, round-trippable through `parse_coefficient`.
    fn render(&self) -> String;
}

impl Coefficient for f64 {
    fn from_bigint(v: &BigInt) -> Self {
        v.to_f64().unwrap_or(f64::NAN)
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn parse_coefficient(s: &str) -> Option<Self> {
        s.trim().parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl Coefficient for f32 {
    fn from_bigint(v: &BigInt) -> Self {
        v.to_f32().unwrap_or(f32::NAN)
    }
    fn to_f64(&self) -> f64 {
        *self as f64
    }
    fn parse_coefficient(s: &str) -> Option<Self> {
        s.trim().parse().ok().filter(|v: &f32| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl Coefficient for BigRational {
    fn from_bigint(v: &BigInt) -> Self {
        BigRational::from_integer(v.clone())
    }
    fn to_f64(&self) -> f64 {
        // ToPrimitive for Ratio<BigInt> handles large numerators without overflow.
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn parse_coefficient(s: &str) -> Option<Self> {
        parse_exact_decimal(s)
    }
    fn render(&self) -> String {
        if self.is_integer() {
            self.numer().to_string()
        } else {
            format!("{}/{}", self.numer(), self.denom())
        }
    }
}

/// Exact parse of a rational literal: `p/q`, integer, or decimal with optional exponent.
fn parse_exact_decimal(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Some((p, q)) = s.split_once('/') {
        let p: BigInt = p.trim().parse().ok()?;
        let q: BigInt = q.trim().parse().ok()?;
        if q.is_zero() {
            return None;
        }
        return Some(BigRational::new(p, q));
    }
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().ok()?),
        None => (s, 0),
    };
    let (negative, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let joined = format!("{int_part}{frac_part}");
    let mut numer: BigInt = joined.parse().ok()?;
    if negative {
        numer = -numer;
    }
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10u8);
    let value = if scale >= 0 {
        BigRational::from_integer(numer * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(numer, num_traits::pow(ten, (-scale) as usize))
    };
    Some(value)
}

/// Converts an `f64` into `F`.
#[inline]
pub(crate) fn cast<F: Real>(v: f64) -> F {
    <F as NumCast>::from(v).unwrap_or_else(F::nan)
}
