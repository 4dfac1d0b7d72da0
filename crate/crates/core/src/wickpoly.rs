//! Hermite polynomials and Wick ordering.
//!
//! For a monic polynomial `R(x) = Σ a_i x^i` of even degree `2n` the Wick-ordered
//! version against a Brownian motion of variance `t` is
//!
//! ```text
//! P_R(x; t) = Σ_i a_i t^{i/2} He_i(x / √t)
//! ```
//!
//! where `He_i` are the monic (probabilists') Hermite polynomials. Since `He_i`
//! only contains powers `x^j` with `i - j` even, every term becomes
//! `x^j t^{(i-j)/2}` with an integer power of `t`: `P_R` is a genuine bivariate
//! polynomial in `(x, t)` for every real `R`, including odd sub-leading terms.
//!
//! Coefficients are kept exact (or in whatever [`Coefficient`] the caller picks);
//! floats only appear at evaluation time.

use num_bigint::BigInt;
use num_traits::{One, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::{cast, Coefficient, Real};

/// Largest supported degree. Hermite coefficients grow like `(k-1)!!`.
pub const MAX_DEGREE: usize = 64;

/// Monic Hermite polynomials `He_0 ..= He_max` with exact integer coefficients,
/// degree-ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteTable {
    rows: Vec<Vec<BigInt>>,
}

/// Builds `He_0 ..= He_max_degree` from `He_{k+1} = x He_k - k He_{k-1}`.
pub fn hermite(max_degree: usize) -> Result<HermiteTable> {
    if max_degree > MAX_DEGREE {
        return Err(Error::Domain(format!(
            "Hermite degree {max_degree} exceeds the cap of {MAX_DEGREE}"
        )));
    }
    let mut rows: Vec<Vec<BigInt>> = Vec::with_capacity(max_degree + 1);
    rows.push(vec![BigInt::one()]);
    if max_degree >= 1 {
        rows.push(vec![BigInt::zero(), BigInt::one()]);
    }
    for k in 1..max_degree {
        let mut next = vec![BigInt::zero(); k + 2];
        for (j, c) in rows[k].iter().enumerate() {
            next[j + 1] += c;
        }
        let kk = BigInt::from(k);
        for (j, c) in rows[k - 1].iter().enumerate() {
            next[j] -= &kk * c;
        }
        rows.push(next);
    }
    Ok(HermiteTable { rows })
}

impl HermiteTable {
    pub fn max_degree(&self) -> usize {
        self.rows.len() - 1
    }

    /// Coefficients of `He_k`, degree-ascending.
    pub fn row(&self, k: usize) -> &[BigInt] {
        &self.rows[k]
    }

    pub fn eval<F: Real>(&self, k: usize, x: F) -> F {
        self.rows[k]
            .iter()
            .rev()
            .fold(F::zero(), |acc, c| acc * x + cast::<F>(f64::from_bigint(c)))
    }
}

/// A real polynomial `R` of even degree `2n ≥ 4` with leading coefficient exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial<T> {
    coeffs: Vec<T>,
}

impl<T: Coefficient> Polynomial<T> {
    /// Validates degree-ascending coefficients. Trailing zeros are not stripped:
    /// the last entry is the leading coefficient and must equal 1.
    pub fn new(coeffs: Vec<T>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidPolynomial("no coefficients".into()));
        }
        let degree = coeffs.len() - 1;
        if degree > MAX_DEGREE {
            return Err(Error::InvalidPolynomial(format!(
                "degree {degree} exceeds the cap of {MAX_DEGREE}"
            )));
        }
        if degree % 2 != 0 {
            return Err(Error::InvalidPolynomial(format!("degree {degree} is odd")));
        }
        if degree < 4 {
            return Err(Error::InvalidPolynomial(format!(
                "degree {degree} is below 4"
            )));
        }
        if !coeffs[degree].is_one() {
            return Err(Error::InvalidPolynomial(format!(
                "leading coefficient is {:?}, expected exactly 1",
                coeffs[degree]
            )));
        }
        Ok(Self { coeffs })
    }

    /// Parses comma-separated degree-ascending coefficients, e.g. `"0,0,0,0,1"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let coeffs = spec
            .split(',')
            .map(|s| {
                T::parse_coefficient(s)
                    .ok_or_else(|| Error::InvalidPolynomial(format!("bad coefficient {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(coeffs)
    }

    /// `x^{2n}`.
    pub fn monomial(degree: usize) -> Result<Self> {
        let mut coeffs = vec![T::zero(); degree + 1];
        coeffs[degree] = T::one();
        Self::new(coeffs)
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// `n` where the degree is `2n`.
    pub fn half_degree(&self) -> usize {
        self.degree() / 2
    }

    pub fn eval<F: Real>(&self, x: F) -> F {
        self.coeffs
            .iter()
            .rev()
            .fold(F::zero(), |acc, c| acc * x + cast::<F>(c.to_f64()))
    }

    /// Comma-separated form accepted by [`Polynomial::parse`].
    pub fn render(&self) -> String {
        self.coeffs
            .iter()
            .map(Coefficient::render)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Bivariate polynomial `Σ c[j][k] x^j t^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bivariate<T> {
    coef: Vec<Vec<T>>,
}

/// One non-zero term of a [`Bivariate`], as emitted by `wick expand`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Term {
    pub xpow: usize,
    pub tpow: usize,
    pub coef: f64,
    pub exact: String,
}

impl<T: Coefficient> Bivariate<T> {
    fn zeros(x_degree: usize) -> Self {
        Self {
            coef: vec![Vec::new(); x_degree + 1],
        }
    }

    fn add_term(&mut self, xpow: usize, tpow: usize, c: T) {
        if xpow >= self.coef.len() {
            self.coef.resize(xpow + 1, Vec::new());
        }
        let row = &mut self.coef[xpow];
        if tpow >= row.len() {
            row.resize(tpow + 1, T::zero());
        }
        row[tpow] = row[tpow].clone() + c;
    }

    /// Coefficient of `x^xpow t^tpow` (zero if absent).
    pub fn coefficient(&self, xpow: usize, tpow: usize) -> T {
        self.coef
            .get(xpow)
            .and_then(|r| r.get(tpow))
            .cloned()
            .unwrap_or_else(T::zero)
    }

    pub fn x_degree(&self) -> usize {
        self.coef
            .iter()
            .rposition(|r| r.iter().any(|c| !c.is_zero()))
            .unwrap_or(0)
    }

    pub fn t_degree(&self) -> usize {
        self.coef
            .iter()
            .filter_map(|r| r.iter().rposition(|c| !c.is_zero()))
            .max()
            .unwrap_or(0)
    }

    /// Non-zero terms ordered by descending `x` power, then ascending `t` power.
    pub fn terms(&self) -> Vec<Term> {
        let mut out = Vec::new();
        for (xpow, row) in self.coef.iter().enumerate().rev() {
            for (tpow, c) in row.iter().enumerate() {
                if !c.is_zero() {
                    out.push(Term {
                        xpow,
                        tpow,
                        coef: c.to_f64(),
                        exact: c.render(),
                    });
                }
            }
        }
        out
    }

    pub fn dx(&self) -> Self {
        let mut out = Self::zeros(self.coef.len().saturating_sub(2));
        for (xpow, row) in self.coef.iter().enumerate().skip(1) {
            let factor = T::from_bigint(&BigInt::from(xpow));
            for (tpow, c) in row.iter().enumerate() {
                out.add_term(xpow - 1, tpow, factor.clone() * c.clone());
            }
        }
        out
    }

    pub fn dt(&self) -> Self {
        let mut out = Self::zeros(self.coef.len().saturating_sub(1));
        for (xpow, row) in self.coef.iter().enumerate() {
            for (tpow, c) in row.iter().enumerate().skip(1) {
                let factor = T::from_bigint(&BigInt::from(tpow));
                out.add_term(xpow, tpow - 1, factor * c.clone());
            }
        }
        out
    }

    pub fn scaled(&self, c: &T) -> Self {
        Self {
            coef: self
                .coef
                .iter()
                .map(|r| r.iter().map(|v| v.clone() * c.clone()).collect())
                .collect(),
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (xpow, row) in other.coef.iter().enumerate() {
            for (tpow, c) in row.iter().enumerate() {
                out.add_term(xpow, tpow, c.clone());
            }
        }
        out
    }

    /// Equality of the represented polynomials, ignoring stored trailing zeros.
    pub fn same_polynomial(&self, other: &Self) -> bool {
        let xd = self.coef.len().max(other.coef.len());
        (0..xd).all(|j| {
            let td = self
                .coef
                .get(j)
                .map_or(0, Vec::len)
                .max(other.coef.get(j).map_or(0, Vec::len));
            (0..td).all(|k| self.coefficient(j, k) == other.coefficient(j, k))
        })
    }

    fn to_float(&self) -> FloatBivariate {
        FloatBivariate {
            coef: self
                .coef
                .iter()
                .map(|r| r.iter().map(Coefficient::to_f64).collect())
                .collect(),
        }
    }
}

/// The linear Wick map applied to arbitrary degree-ascending coefficients
/// (no monic/even validation). `wick_order` is this map on a validated `R`.
pub fn wick_terms<T: Coefficient>(coeffs: &[T], table: &HermiteTable) -> Result<Bivariate<T>> {
    let degree = coeffs.len().saturating_sub(1);
    if degree > table.max_degree() {
        return Err(Error::Domain(format!(
            "degree {degree} exceeds Hermite table degree {}",
            table.max_degree()
        )));
    }
    let mut out = Bivariate::zeros(degree);
    for (i, a) in coeffs.iter().enumerate() {
        if a.is_zero() {
            continue;
        }
        // a_i t^{i/2} He_i(x/√t) = Σ_j a_i h_{i,j} x^j t^{(i-j)/2}; h_{i,j} = 0 unless i-j even.
        for (j, h) in table.row(i).iter().enumerate() {
            if h.is_zero() {
                continue;
            }
            debug_assert!((i - j) % 2 == 0);
            out.add_term(j, (i - j) / 2, a.clone() * T::from_bigint(h));
        }
    }
    Ok(out)
}

/// Float copy of a bivariate polynomial for fast evaluation.
#[derive(Debug, Clone, PartialEq)]
struct FloatBivariate {
    coef: Vec<Vec<f64>>,
}

impl FloatBivariate {
    #[inline]
    fn eval<F: Real>(&self, x: F, t: F) -> F {
        let mut acc = F::zero();
        for row in self.coef.iter().rev() {
            let c = row
                .iter()
                .rev()
                .fold(F::zero(), |a, &v| a * t + cast::<F>(v));
            acc = acc * x + c;
        }
        acc
    }

    /// Univariate coefficients in `x` at fixed `t`, degree-ascending.
    fn slice<F: Real>(&self, t: F) -> Vec<F> {
        self.coef
            .iter()
            .map(|row| row.iter().rev().fold(F::zero(), |a, &v| a * t + cast::<F>(v)))
            .collect()
    }
}

/// `P_R(x; t)` together with its derivatives.
#[derive(Debug, Clone)]
pub struct WickPolynomial<T> {
    base: Polynomial<T>,
    expansion: Bivariate<T>,
    p: FloatBivariate,
    px: FloatBivariate,
    pxx: FloatBivariate,
    pt: FloatBivariate,
}

/// Wick-orders a validated polynomial.
pub fn wick_order<T: Coefficient>(r: &Polynomial<T>) -> WickPolynomial<T> {
    let table = hermite(r.degree()).expect("degree validated by Polynomial::new");
    let expansion = wick_terms(r.coeffs(), &table).expect("table covers degree");
    let dx = expansion.dx();
    let dxx = dx.dx();
    let dt = expansion.dt();
    WickPolynomial {
        base: r.clone(),
        p: expansion.to_float(),
        px: dx.to_float(),
        pxx: dxx.to_float(),
        pt: dt.to_float(),
        expansion,
    }
}

impl<T: Coefficient> WickPolynomial<T> {
    pub fn base(&self) -> &Polynomial<T> {
        &self.base
    }

    pub fn expansion(&self) -> &Bivariate<T> {
        &self.expansion
    }

    pub fn degree(&self) -> usize {
        self.base.degree()
    }

    pub fn half_degree(&self) -> usize {
        self.base.half_degree()
    }

    /// `P_R(x; t)`.
    #[inline]
    pub fn eval<F: Real>(&self, x: F, t: F) -> F {
        self.p.eval(x, t)
    }

    /// `∂P_R/∂x (x; t)`.
    #[inline]
    pub fn eval_dx<F: Real>(&self, x: F, t: F) -> F {
        self.px.eval(x, t)
    }

    #[inline]
    pub fn eval_dxx<F: Real>(&self, x: F, t: F) -> F {
        self.pxx.eval(x, t)
    }

    /// `∂P_R/∂t (x; t)`.
    #[inline]
    pub fn eval_dt<F: Real>(&self, x: F, t: F) -> F {
        self.pt.eval(x, t)
    }

    /// Coefficients of `x ↦ P_R(x; t)`, degree-ascending.
    pub fn slice_at<F: Real>(&self, t: F) -> Vec<F> {
        self.p.slice(t)
    }

    /// Coefficients of `x ↦ ∂_x P_R(x; t)`.
    pub fn slice_dx_at<F: Real>(&self, t: F) -> Vec<F> {
        self.px.slice(t)
    }

    pub fn slice_dxx_at<F: Real>(&self, t: F) -> Vec<F> {
        self.pxx.slice(t)
    }
}
