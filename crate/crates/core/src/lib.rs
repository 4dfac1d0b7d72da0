//! Wick-ordered polynomial martingales of a log-correlated Gaussian field.
//!
//! The crate covers the constructive pieces behind negative exponential moments
//! of `∫ :R(X):` for the two-dimensional Gaussian free field:
//!
//! * [`wickpoly`]: Hermite polynomials and the bivariate Wick polynomial `P_R(x; t)`.
//! * [`envelope`]: outermost zero envelope `f_R(t)`, the cone `g(t) = t + A`, calibration.
//! * [`paths`]: single-site Brownian paths, alternating cone/envelope stopping times,
//!   the low/high decomposition and hitting statistics.
//! * [`coupling`]: independent and parallel Brownian couplings, closed-form exit laws.
//! * [`gff`]: a Gaussian scale decomposition of the covariance, field sampling,
//!   and the field functional `D_t`.
//! * [`estimators`]: Monte Carlo moment estimators, log-MGF fits, quadratic-variation bounds.
//! * [`verify`]: the end-to-end checks run by `wickmart verify-all` and the acceptance suite.
//!
//! Polynomials are generic over the coefficient type (exact rationals or floats)
//! and evaluate in any [`Real`]; simulation layers work in `f64`.

pub mod cli;
pub mod coupling;
pub mod envelope;
pub mod error;
pub mod estimators;
pub mod gff;
pub mod paths;
pub mod quad;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod verify;
pub mod wickpoly;

pub use error::{Error, Result};
pub use scalar::{Coefficient, Real};

/// Exact rational coefficients.
pub type Rational = num_rational::BigRational;

/// Input polynomial with exact coefficients (the default everywhere in the CLI).
pub type ExactPolynomial = wickpoly::Polynomial<Rational>;
/// Wick polynomial with exact coefficients.
pub type ExactWick = wickpoly::WickPolynomial<Rational>;

/// Float-coefficient variants.
pub type Polynomial64 = wickpoly::Polynomial<f64>;
pub type Wick64 = wickpoly::WickPolynomial<f64>;
pub type Polynomial32 = wickpoly::Polynomial<f32>;
pub type Wick32 = wickpoly::WickPolynomial<f32>;
