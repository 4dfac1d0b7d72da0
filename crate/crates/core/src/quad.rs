//! Adaptive one-dimensional quadrature on top of tanh-sinh rules.

use crate::{Error, Result};

const MAX_DEPTH: u32 = 40;

/// Integral value with the accumulated error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
}

/// `∫_a^b f` to absolute error `tol`, bisecting any panel whose local estimate
/// misses its share of the budget.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<Integral> {
    if a == b {
        return Ok(Integral { value: 0.0, error: 0.0 });
    }
    if !(a.is_finite() && b.is_finite() && tol > 0.0) {
        return Err(Error::Domain(format!(
            "quadrature needs finite limits and positive tolerance, got [{a}, {b}] tol {tol}"
        )));
    }
    panel(&f, a, b, tol, 0)
}

fn panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> Result<Integral> {
    let out = quadrature::double_exponential::integrate(f, a, b, tol);
    if !out.integral.is_finite() {
        return Err(Error::Numerical(format!("non-finite integrand on [{a}, {b}]")));
    }
    if out.error_estimate <= tol {
        return Ok(Integral {
            value: out.integral,
            error: out.error_estimate,
        });
    }
    if depth >= MAX_DEPTH {
        return Err(Error::Numerical(format!(
            "quadrature did not reach {tol:e} on [{a}, {b}] (estimate {:e})",
            out.error_estimate
        )));
    }
    let m = 0.5 * (a + b);
    let left = panel(f, a, m, 0.5 * tol, depth + 1)?;
    let right = panel(f, m, b, 0.5 * tol, depth + 1)?;
    Ok(Integral {
        value: left.value + right.value,
        error: left.error + right.error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_gaussian() {
        let r = integrate(|x| x * x, 0.0, 3.0, 1e-12).unwrap();
        assert!((r.value - 9.0).abs() < 1e-12);
        let g = integrate(|x| (-0.5 * x * x).exp(), -12.0, 12.0, 1e-12).unwrap();
        assert!((g.value - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-11);
    }

    #[test]
    fn reversed_and_empty() {
        assert_eq!(integrate(|x| x, 1.0, 1.0, 1e-9).unwrap().value, 0.0);
        let r = integrate(|x| x, 2.0, 0.0, 1e-12).unwrap();
        assert!((r.value + 2.0).abs() < 1e-12);
    }

    #[test]
    fn kink_forces_splitting() {
        let r = integrate(|x: f64| (x - 0.3).abs(), 0.0, 1.0, 1e-12).unwrap();
        assert!((r.value - 0.29).abs() < 1e-11, "{}", r.value);
    }

    #[test]
    fn rejects_bad_limits() {
        assert!(integrate(|x| x, 0.0, f64::INFINITY, 1e-9).is_err());
        assert!(integrate(|x| x, 0.0, 1.0, 0.0).is_err());
    }
}
