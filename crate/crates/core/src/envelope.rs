//! Zero envelope `f_R(t)` and the cone `g(t) = t + A`.
//!
//! `f_R(t)` is the largest `|u|` with `P_R(u; t) = 0` (zero when there is no real
//! root), so `P_R(·; t) > 0` outside `[-f_R(t), f_R(t)]`. The cone offset `A` and
//! the slacks `A'(ε)` are calibrated numerically on a finite horizon.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Coefficient, Real};
use crate::wickpoly::WickPolynomial;

const BISECTION_CAP: usize = 400;

/// Largest integer offset tried by [`calibrate_cone`].
pub const MAX_CONE_OFFSET: u32 = 10_000;

fn horner<F: Real>(coeffs: &[F], x: F) -> F {
    coeffs.iter().rev().fold(F::zero(), |acc, &c| acc * x + c)
}

fn derivative<F: Real>(coeffs: &[F]) -> Vec<F> {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &c)| c * cast::<F>(i as f64))
        .collect()
}

/// Roughly the rounding error of evaluating `coeffs` at `x` with Horner's rule.
fn eval_noise<F: Real>(coeffs: &[F], x: F) -> F {
    let ax = x.abs();
    let mag = coeffs
        .iter()
        .rev()
        .fold(F::zero(), |acc, &c| acc * ax + c.abs());
    mag * F::epsilon() * cast::<F>(4.0 * coeffs.len() as f64)
}

/// All distinct real roots of a polynomial with degree-ascending `coeffs`, ascending.
///
/// Critical points (roots of the derivative, found recursively) split the real line
/// into monotone pieces bracketed by the Cauchy bound; each piece with a sign change
/// is bisected to `1e-12` relative width and polished with one Newton step. A
/// critical point where the polynomial vanishes to rounding is reported as a
/// multiple root.
pub fn real_roots<F: Real>(coeffs: &[F]) -> Result<Vec<F>> {
    let len = coeffs
        .iter()
        .rposition(|c| !c.is_zero())
        .map_or(0, |i| i + 1);
    let coeffs = &coeffs[..len];
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("non-finite polynomial coefficient".into()));
    }
    match len {
        0 | 1 => return Ok(Vec::new()),
        2 => return Ok(vec![-coeffs[0] / coeffs[1]]),
        _ => {}
    }
    let lead = coeffs[len - 1];
    let bound = F::one()
        + coeffs[..len - 1]
            .iter()
            .fold(F::zero(), |m, &c| m.max((c / lead).abs()));

    let dcoeffs = derivative(coeffs);
    let crit = real_roots(&dcoeffs)?;

    let mut breaks = Vec::with_capacity(crit.len() + 2);
    breaks.push(-bound);
    breaks.extend(crit.iter().copied().filter(|c| c.abs() < bound));
    breaks.push(bound);

    let mut roots: Vec<F> = Vec::new();
    let push = |r: F, roots: &mut Vec<F>| {
        let dup = roots.last().is_some_and(|&last: &F| {
            (r - last).abs() <= cast::<F>(1e-12) * F::one().max(r.abs())
        });
        if !dup {
            roots.push(r);
        }
    };

    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let fa = horner(coeffs, a);
        let fb = horner(coeffs, b);
        if fa.abs() <= eval_noise(coeffs, a) {
            push(a, &mut roots);
            continue;
        }
        if fb.abs() <= eval_noise(coeffs, b) || fa.signum() == fb.signum() {
            continue;
        }
        let root = bisect(coeffs, &dcoeffs, a, b, fa)?;
        push(root, &mut roots);
    }
    let last = *breaks.last().expect("non-empty");
    if horner(coeffs, last).abs() <= eval_noise(coeffs, last) {
        push(last, &mut roots);
    }
    Ok(roots)
}

fn bisect<F: Real>(coeffs: &[F], dcoeffs: &[F], mut a: F, mut b: F, fa: F) -> Result<F> {
    let tol = cast::<F>(1e-12).max(F::epsilon() * cast::<F>(4.0));
    let two = cast::<F>(2.0);
    let sa = fa.signum();
    let mut converged = false;
    for _ in 0..BISECTION_CAP {
        let m = (a + b) / two;
        if (b - a) <= tol * F::one().max(m.abs()) || m <= a || m >= b {
            converged = true;
            break;
        }
        let fm = horner(coeffs, m);
        if fm.is_zero() {
            return Ok(m);
        }
        if fm.signum() == sa {
            a = m;
        } else {
            b = m;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "bisection did not converge within {BISECTION_CAP} steps on [{a:?}, {b:?}]"
        )));
    }
    let m = (a + b) / two;
    let d = horner(dcoeffs, m);
    if d.is_zero() || !d.is_finite() {
        return Ok(m);
    }
    let polished = m - horner(coeffs, m) / d;
    let slack = b - a;
    Ok(if polished >= a - slack && polished <= b + slack {
        polished
    } else {
        m
    })
}

/// `f_R(t)`: the largest magnitude of a real root of `P_R(·; t)`, or zero.
pub fn zero_envelope<T: Coefficient, F: Real>(p: &WickPolynomial<T>, t: F) -> Result<F> {
    if !(t >= F::zero()) || !t.is_finite() {
        return Err(Error::Domain(format!("envelope time must be finite and ≥ 0, got {t:?}")));
    }
    let roots = real_roots(&p.slice_at(t))?;
    Ok(roots.iter().fold(F::zero(), |m, r| m.max(r.abs())))
}

/// `f_R` on the grid `t_offset + i·dt`, `i = 0..len`.
pub fn envelope_on_grid<T: Coefficient>(
    p: &WickPolynomial<T>,
    t_offset: f64,
    dt: f64,
    len: usize,
) -> Result<Vec<f64>> {
    (0..len)
        .map(|i| zero_envelope(p, t_offset + i as f64 * dt))
        .collect()
}

/// Smallest constant `A'(ε)` found for one `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsSlack {
    pub eps: f64,
    #[serde(rename = "A_prime")]
    pub a_prime: f64,
}

/// Calibrated cone: `g(t) = t + A` dominates the envelope, and
/// `f_R(t) ≤ ε t + A'(ε)` for each stored `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeConfig {
    #[serde(rename = "A")]
    pub a: f64,
    pub eps_table: Vec<EpsSlack>,
    pub t_check_max: f64,
    /// Polynomial the cone was calibrated for, in `--poly` format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poly: Option<String>,
}

impl ConeConfig {
    /// A cone with a given offset and no calibration data (tests, hand-built setups).
    pub fn with_offset(a: f64) -> Self {
        Self {
            a,
            eps_table: Vec::new(),
            t_check_max: 0.0,
            poly: None,
        }
    }

    /// `g(t) = t + A`.
    #[inline]
    pub fn g(&self, t: f64) -> f64 {
        t + self.a
    }

    pub fn a_prime(&self, eps: f64) -> Option<f64> {
        self.eps_table
            .iter()
            .find(|e| (e.eps - eps).abs() <= 1e-12)
            .map(|e| e.a_prime)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        if !(cfg.a >= 0.0) || !cfg.a.is_finite() {
            return Err(Error::Config(format!("cone offset A must be ≥ 0, got {}", cfg.a)));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// `P_R(g(t); t)`.
pub fn cone_value<T: Coefficient>(p: &WickPolynomial<T>, cfg: &ConeConfig, t: f64) -> f64 {
    p.eval(cfg.g(t), t)
}

/// `d/dt P_R(t + A; t) = ∂_x P_R + ∂_t P_R` along the cone.
pub fn cone_slope<T: Coefficient>(p: &WickPolynomial<T>, a: f64, t: f64) -> f64 {
    let x = t + a;
    p.eval_dx(x, t) + p.eval_dt(x, t)
}

/// 10⁴ uniform points on `[0, t_max]` plus a geometric refinement towards 0.
pub fn calibration_grid(t_max: f64) -> Vec<f64> {
    const UNIFORM: usize = 10_000;
    const GEOMETRIC: i32 = 48;
    let h = t_max / (UNIFORM - 1) as f64;
    let mut grid: Vec<f64> = (0..UNIFORM).map(|i| i as f64 * h).collect();
    grid.extend((1..=GEOMETRIC).map(|k| h * 10f64.powf(-(k as f64) / 6.0)));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Which of the three cone conditions fails for offset `a`, if any.
fn cone_violation<T: Coefficient>(
    p: &WickPolynomial<T>,
    grid: &[f64],
    envelope: &[f64],
    a: f64,
) -> Option<&'static str> {
    for (&t, &f) in grid.iter().zip(envelope) {
        if f > t + a {
            return Some("envelope above cone");
        }
        if !(p.eval(t + a, t) > 0.0) {
            return Some("cone value not positive");
        }
        if !(cone_slope(p, a, t) > 0.0) {
            return Some("cone value not strictly increasing");
        }
    }
    None
}

/// Smallest integer `A ≥ 1` passing the cone checks on the calibration grid, plus a
/// margin of one, and the smallest integer `A'(ε)` for each `ε`.
pub fn calibrate_cone<T: Coefficient>(
    p: &WickPolynomial<T>,
    t_max: f64,
    eps_list: &[f64],
) -> Result<ConeConfig> {
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(Error::Domain(format!("calibration horizon must be > 0, got {t_max}")));
    }
    if let Some(e) = eps_list.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::Domain(format!("ε must lie in (0, 1), got {e}")));
    }
    let grid = calibration_grid(t_max);
    let envelope = grid
        .iter()
        .map(|&t| zero_envelope(p, t))
        .collect::<Result<Vec<f64>>>()?;

    let excess = grid
        .iter()
        .zip(&envelope)
        .fold(f64::NEG_INFINITY, |m, (&t, &f)| m.max(f - t));
    let start = excess.ceil().max(1.0) as u32;

    let mut found = None;
    for a in start..=MAX_CONE_OFFSET {
        if cone_violation(p, &grid, &envelope, a as f64).is_some() {
            continue;
        }
        let with_margin = a + 1;
        if with_margin <= MAX_CONE_OFFSET
            && cone_violation(p, &grid, &envelope, with_margin as f64).is_none()
        {
            found = Some(with_margin);
            break;
        }
    }
    let a = found.ok_or_else(|| {
        Error::Calibration(format!(
            "no integer offset A ≤ {MAX_CONE_OFFSET} satisfies the cone checks on [0, {t_max}]"
        ))
    })?;

    let eps_table = eps_list
        .iter()
        .map(|&eps| {
            let worst = grid
                .iter()
                .zip(&envelope)
                .fold(0.0f64, |m, (&t, &f)| m.max(f - eps * t));
            EpsSlack {
                eps,
                a_prime: worst.ceil(),
            }
        })
        .collect();

    Ok(ConeConfig {
        a: a as f64,
        eps_table,
        t_check_max: t_max,
        poly: Some(p.base().render()),
    })
}

/// Full check of a cone against `P` on the calibration grid over `[0, t_max]`.
pub fn verify_cone<T: Coefficient>(p: &WickPolynomial<T>, cfg: &ConeConfig, t_max: f64) -> Result<()> {
    let grid = calibration_grid(t_max);
    let envelope = grid
        .iter()
        .map(|&t| zero_envelope(p, t))
        .collect::<Result<Vec<f64>>>()?;
    match cone_violation(p, &grid, &envelope, cfg.a) {
        None => Ok(()),
        Some(why) => Err(Error::Calibration(format!("A = {}: {why}", cfg.a))),
    }
}
