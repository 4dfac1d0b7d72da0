//! Exponential-moment estimators, log-MGF curves with Gaussian-concentration
//! fits, and quadratic-variation bounds.
//!
//! Every exponential moment is computed as a log-sum-exp with a max shift, so
//! `α·|D|` in the hundreds is harmless.

use std::cell::RefCell;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::envelope::{real_roots, ConeConfig};
use crate::gff::{field_barriers, field_runs, functional_samples, spatial_integral, FieldSampler, GridDomain, KernelDecomposition, SpatialRule};
use crate::paths::SimConfig;
use crate::quad::integrate;
use crate::rng::stream;
use crate::stats::{par_chunks, McEstimate, Moments};
use crate::wickpoly::WickPolynomial;
use crate::{Coefficient, Error, Result};

/// Fewest samples accepted by the moment estimators.
pub const MIN_SAMPLES: usize = 100;
/// Effective sample size below which an exponential moment is unreliable.
pub const MIN_ESS: f64 = 50.0;

/// MC mean of `exp(λB_t − λ²t/2)`, drawing `B_t = √t·Z` directly.
pub fn exp_martingale_check(lambda: f64, t: f64, cfg: &SimConfig) -> Result<McEstimate> {
    if !(lambda.abs() <= 2.0) {
        return Err(Error::Domain(format!("|λ| must be ≤ 2, got {lambda}")));
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("t must be ≥ 0, got {t}")));
    }
    if lambda == 0.0 || t == 0.0 {
        return Ok(McEstimate {
            mean: 1.0,
            stderr: 0.0,
            n: cfg.n_paths,
            seed: cfg.seed,
        });
    }
    let drift = lambda * lambda * t / 2.0;
    let scale = lambda * t.sqrt();
    let m = par_chunks(cfg.n_paths, |r| {
        let mut m = Moments::default();
        for i in r {
            let z: f64 = stream(cfg.seed, i).sample(StandardNormal);
            m.push((scale * z - drift).exp());
        }
        m
    })
    .iter()
    .fold(Moments::default(), |mut a, b| {
        a.merge(b);
        a
    });
    Ok(m.estimate(cfg.seed))
}

/// Max-shifted weights `exp(αy_i − max)` and the shift.
fn shifted_weights(samples: &[f64], alpha: f64) -> (Vec<f64>, f64) {
    let shift = samples.iter().map(|&y| alpha * y).fold(f64::NEG_INFINITY, f64::max);
    (samples.iter().map(|&y| (alpha * y - shift).exp()).collect(), shift)
}

fn ess(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|w| w * w).sum();
    s * s / s2
}

/// `ln mean exp(αy)` with its jackknife standard error and effective sample size.
fn log_mean_exp(samples: &[f64], alpha: f64) -> (f64, f64, f64) {
    let n = samples.len();
    let (w, shift) = shifted_weights(samples, alpha);
    // leave-one-out sums from prefix and suffix sums, so no cancellation
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + w[i];
    }
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + w[i];
    }
    let value = shift + (prefix[n] / n as f64).ln();
    let loo: Vec<f64> = (0..n)
        .map(|i| shift + ((prefix[i] + suffix[i + 1]) / (n - 1) as f64).ln())
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let var = loo.iter().map(|l| (l - mean).powi(2)).sum::<f64>() * (n - 1) as f64 / n as f64;
    (value, var.sqrt(), ess(&w))
}

/// Solves the 2×2 normal equations `[a b; b c]·x = r`.
fn solve2(a: f64, b: f64, c: f64, r: [f64; 2]) -> Option<[f64; 2]> {
    let det = a * c - b * b;
    (det.abs() > 1e-300).then(|| [(c * r[0] - b * r[1]) / det, (a * r[1] - b * r[0]) / det])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MgfCurve {
    pub alphas: Vec<f64>,
    /// `ln E[e^{αY}]` per retained α, jackknife standard errors.
    pub log_mgf: Vec<McEstimate>,
    pub ess: Vec<f64>,
    /// α values dropped because the estimate overflowed.
    pub dropped: Vec<f64>,
    /// `Ĉ` in `ln E[e^{αY}] ≈ Ĉα²`.
    pub quad_fit: f64,
    /// `max |ln E[e^{αY}] − Ĉα²|` over the grid.
    pub residual: f64,
    /// `b` in the diagnostic fit `bα + cα²`.
    pub linear_term: f64,
    /// The linear term dominates the quadratic one at the largest `|α|`.
    pub quadratic_rejected: bool,
    /// `|c₄|α²_max / |c₂|` from fitting `c₂α² + c₄α⁴` to the even part.
    pub quartic_ratio: Option<f64>,
    /// Every adjacent triple is convex within two standard errors.
    pub convex: bool,
}

/// Log-MGF of `samples` on a grid symmetric about zero, with a quadratic fit
/// through the origin.
pub fn mgf_curve(samples: &[f64], alphas: &[f64], seed: u64) -> Result<MgfCurve> {
    if samples.len() < 1000 {
        return Err(Error::Config(format!("need at least 1000 samples, got {}", samples.len())));
    }
    if samples.iter().any(|y| !y.is_finite()) {
        return Err(Error::Numerical("non-finite sample".into()));
    }
    let mut grid = alphas.to_vec();
    grid.sort_by(f64::total_cmp);
    let symmetric = grid
        .iter()
        .zip(grid.iter().rev())
        .all(|(a, b)| (a + b).abs() <= 1e-12 * (1.0 + a.abs()));
    if grid.len() < 3 || !symmetric || grid.iter().any(|a| !a.is_finite()) {
        return Err(Error::Config("α grid must hold at least three values symmetric about 0".into()));
    }
    let n = samples.len() as u64;
    let mut kept = Vec::new();
    let mut log_mgf = Vec::new();
    let mut ess_list = Vec::new();
    let mut dropped = Vec::new();
    for &a in &grid {
        let (value, se, e) = if a == 0.0 {
            (0.0, 0.0, n as f64)
        } else {
            log_mean_exp(samples, a)
        };
        if value.is_finite() && se.is_finite() {
            kept.push(a);
            log_mgf.push(McEstimate {
                mean: value,
                stderr: se,
                n,
                seed,
            });
            ess_list.push(e);
        } else {
            dropped.push(a);
        }
    }
    let ys: Vec<f64> = log_mgf.iter().map(|e| e.mean).collect();
    let pw = |k: i32| kept.iter().map(|a| a.powi(k)).sum::<f64>();
    let pwy = |k: i32| kept.iter().zip(&ys).map(|(a, y)| a.powi(k) * y).sum::<f64>();
    let s4 = pw(4);
    if s4 == 0.0 {
        return Err(Error::Numerical("every non-zero α overflowed".into()));
    }
    let quad_fit = pwy(2) / s4;
    let residual = kept
        .iter()
        .zip(&ys)
        .map(|(a, y)| (y - quad_fit * a * a).abs())
        .fold(0.0, f64::max);
    let alpha_max = kept.iter().map(|a| a.abs()).fold(0.0, f64::max);
    let linear_term = solve2(pw(2), pw(3), pw(4), [pwy(1), pwy(2)]).map_or(0.0, |x| x[0]);
    let quadratic_rejected = linear_term.abs() * alpha_max > quad_fit.abs() * alpha_max * alpha_max;

    // even part on the positive half of the grid
    let even: Vec<(f64, f64)> = kept
        .iter()
        .zip(&ys)
        .filter(|(a, _)| **a > 0.0)
        .filter_map(|(&a, &y)| {
            kept.iter()
                .position(|b| (a + b).abs() <= 1e-12 * (1.0 + a))
                .map(|j| (a, 0.5 * (y + ys[j])))
        })
        .collect();
    let quartic_ratio = (even.len() >= 2).then(|| {
        let e = |k: i32| even.iter().map(|(a, _)| a.powi(k)).sum::<f64>();
        let ey = |k: i32| even.iter().map(|(a, y)| a.powi(k) * y).sum::<f64>();
        solve2(e(4), e(6), e(8), [ey(2), ey(4)]).map(|[c2, c4]| (c4 * alpha_max * alpha_max / c2).abs())
    })
    .flatten();

    let convex = (0..kept.len().saturating_sub(2)).all(|i| {
        let (h1, h2) = (kept[i + 1] - kept[i], kept[i + 2] - kept[i + 1]);
        let (w1, w2, w3) = (h2, h1 + h2, h1);
        let d = w1 * ys[i] - w2 * ys[i + 1] + w3 * ys[i + 2];
        let s = |k: usize| log_mgf[k].stderr;
        let se = ((w1 * s(i)).powi(2) + (w2 * s(i + 1)).powi(2) + (w3 * s(i + 2)).powi(2)).sqrt();
        d >= -2.0 * se
    });
    Ok(MgfCurve {
        alphas: kept,
        log_mgf,
        ess: ess_list,
        dropped,
        quad_fit,
        residual,
        linear_term,
        quadratic_rejected,
        quartic_ratio,
        convex,
    })
}

/// An exponential moment `E[e^{αY}]` from samples, max-shifted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpMoment {
    pub estimate: McEstimate,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ess: f64,
    pub reliable: bool,
}

pub fn exp_moment(samples: &[f64], alpha: f64, seed: u64) -> Result<ExpMoment> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::Config(format!(
            "need at least {MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as u64;
    if alpha == 0.0 {
        let estimate = McEstimate {
            mean: 1.0,
            stderr: 0.0,
            n,
            seed,
        };
        return Ok(ExpMoment {
            estimate,
            ci_low: 1.0,
            ci_high: 1.0,
            ess: n as f64,
            reliable: true,
        });
    }
    let (w, shift) = shifted_weights(samples, alpha);
    let m: Moments = w.iter().copied().collect();
    let scale = shift.exp();
    let (mean, stderr) = (scale * m.mean(), scale * m.stderr());
    if !(mean.is_finite() && stderr.is_finite()) {
        return Err(Error::Numerical(format!("exponential moment overflowed at α = {alpha}")));
    }
    let ess = ess(&w);
    Ok(ExpMoment {
        estimate: McEstimate { mean, stderr, n, seed },
        ci_low: mean - 1.96 * stderr,
        ci_high: mean + 1.96 * stderr,
        ess,
        reliable: ess >= MIN_ESS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NegExpRow {
    pub t: f64,
    pub moment: ExpMoment,
    /// Sample mean of `D_t`.
    pub mean_d: f64,
    /// `estimate ≥ 1 − 3·SE`, Jensen's inequality for a centred `D_t`.
    pub jensen_ok: bool,
}

/// `E[e^{−αD_t}]` for each `t`, from `n` field replicas.
pub fn neg_exp_moment<T: Coefficient>(
    alpha: f64,
    t_list: &[f64],
    sampler: &FieldSampler,
    p: &WickPolynomial<T>,
    n: u64,
    seed: u64,
) -> Result<Vec<NegExpRow>> {
    if !(0.0..=0.2).contains(&alpha) {
        return Err(Error::Domain(format!("α must lie in [0, 0.2], got {alpha}")));
    }
    if sampler.domain().m > 16 {
        return Err(Error::Config(format!("grid side {} exceeds 16", sampler.domain().m)));
    }
    let samples = functional_samples(sampler, p, t_list, n, seed)?;
    t_list
        .iter()
        .zip(samples)
        .map(|(&t, d)| {
            let neg: Vec<f64> = d.iter().map(|x| -x).collect();
            let moment = exp_moment(&neg, alpha, seed)?;
            Ok(NegExpRow {
                t,
                moment,
                mean_d: d.iter().sum::<f64>() / d.len() as f64,
                jensen_ok: moment.estimate.mean >= 1.0 - 3.0 * moment.estimate.stderr,
            })
        })
        .collect()
}

/// `sup_{|v| ≤ g(s)} |P'_R(v; s)|`, over the endpoints and the critical points of `P'_R`.
pub fn derivative_sup<T: Coefficient>(p: &WickPolynomial<T>, cone: &ConeConfig, s: f64) -> Result<f64> {
    let g = cone.g(s);
    let crit = real_roots(&p.slice_dxx_at(s))?;
    Ok(crit
        .into_iter()
        .filter(|v: &f64| v.abs() <= g)
        .chain([g, -g])
        .map(|v| p.eval_dx(v, s).abs())
        .fold(0.0, f64::max))
}

/// `∫_0^t sup_{|v|≤g(s)} |P'_R(v;s)|² · ∫∫ Q_s ds`: a bound for the quadratic
/// variation accumulated on LOW steps.
pub fn qv_bound<T: Coefficient>(
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    kd: &KernelDecomposition,
    domain: &GridDomain,
    t: f64,
    rule: SpatialRule,
) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("t must be ≥ 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let failure = RefCell::new(None);
    let f = |s: f64| match derivative_sup(p, cone, s) {
        Ok(v) => v * v * spatial_integral(kd, domain, s, rule),
        Err(e) => {
            failure.borrow_mut().get_or_insert(e.to_string());
            f64::NAN
        }
    };
    let scale = f(0.0).abs().max(1.0);
    let out = integrate(f, 0.0, t, 1e-10 * scale);
    if let Some(e) = failure.into_inner() {
        return Err(Error::Numerical(e));
    }
    Ok(out?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QvCheck {
    pub t: f64,
    /// Mean of `Σ_k (ΔD_L)²` over replicas.
    pub realized: McEstimate,
    /// Grid-pair bound, the one that dominates the realized sum.
    pub bound: f64,
    pub holds: bool,
}

/// Realized LOW quadratic variation of simulated fields against `qv_bound`.
pub fn qv_check<T: Coefficient>(
    sampler: &FieldSampler,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    kd: &KernelDecomposition,
    t: f64,
    n: u64,
    seed: u64,
) -> Result<QvCheck> {
    let b = field_barriers(sampler, p, cone, t)?;
    let realized: Moments = field_runs(sampler, p, &b, n, seed).iter().map(|r| r.realized_qv).collect();
    let realized = realized.estimate(seed);
    let bound = qv_bound(p, cone, kd, sampler.domain(), t, SpatialRule::GridPairs)?;
    Ok(QvCheck {
        t,
        realized,
        bound,
        holds: realized.mean <= bound + 3.0 * realized.stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::calibrate_cone;
    use crate::wickpoly::{wick_order, Polynomial};
    use crate::Rational;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn normals(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn grid() -> Vec<f64> {
        (-4..=4).map(|k| 0.05 * k as f64).collect()
    }

    #[test]
    fn exp_martingale_identity() {
        let cfg = SimConfig::new(1e-2, 2.0, 1_000_000, 11).unwrap();
        let zero = exp_martingale_check(0.0, 1.0, &cfg).unwrap();
        assert_eq!((zero.mean, zero.stderr), (1.0, 0.0));
        for (lambda, t) in [(1.0, 1.0), (0.5, 2.0), (2.0, 2.0)] {
            let e = exp_martingale_check(lambda, t, &cfg).unwrap();
            assert!(e.within(1.0, 4.0), "λ={lambda} t={t}: {e:?}");
        }
        assert!(exp_martingale_check(2.5, 1.0, &cfg).is_err());
    }

    #[test]
    fn gaussian_curve() {
        let sigma = 3.0;
        let c = mgf_curve(&normals(100_000, sigma, 1), &grid(), 1).unwrap();
        assert!(((c.quad_fit - sigma * sigma / 2.0) / (sigma * sigma / 2.0)).abs() < 0.1, "{}", c.quad_fit);
        let zero = c.alphas.iter().position(|&a| a == 0.0).unwrap();
        assert_eq!(c.log_mgf[zero].mean, 0.0);
        assert!(c.convex && !c.quadratic_rejected && c.dropped.is_empty());
        assert!(c.quartic_ratio.unwrap() < 0.2);
    }

    #[test]
    fn jackknife_matches_delta_method_for_light_tails() {
        // for a tight Gaussian the delta method is accurate
        let y = normals(20_000, 1.0, 2);
        let (v, se, e) = log_mean_exp(&y, 0.1);
        let w: Moments = y.iter().map(|&x| (0.1 * x).exp()).collect();
        let delta = w.stderr() / w.mean();
        assert!((v - w.mean().ln()).abs() < 1e-12);
        assert!((se - delta).abs() < 0.02 * delta, "{se} {delta}");
        assert!(e > 19_000.0);
    }

    #[test]
    fn constant_samples_reject_quadratic() {
        let c = mgf_curve(&vec![2.0; 1000], &grid(), 0).unwrap();
        assert!(c.quadratic_rejected);
        assert!((c.linear_term - 2.0).abs() < 1e-9);
        assert!(c.quad_fit.abs() < 1e-9);
    }

    #[test]
    fn extreme_alpha_is_dropped() {
        let mut y = normals(1000, 1.0, 3);
        y[0] = 1e306;
        let c = mgf_curve(&y, &[-10.0, -0.1, 0.0, 0.1, 10.0], 0).unwrap();
        assert!(c.dropped.contains(&10.0));
        assert!(!c.alphas.contains(&10.0));
    }

    #[test]
    fn mgf_preconditions() {
        assert!(mgf_curve(&[0.0; 10], &grid(), 0).is_err());
        assert!(mgf_curve(&normals(1000, 1.0, 4), &[0.0, 0.1, 0.2], 0).is_err());
    }

    #[test]
    fn quartic_ratio_sees_heavy_tails() {
        // exponential samples: ln E e^{αY} = −α − ln(1−α) has a visible α³/α⁴ part
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..200_000)
            .map(|_| -rng.gen::<f64>().ln() - 1.0)
            .collect();
        let alphas: Vec<f64> = (-8..=8).map(|k| 0.05 * k as f64).collect();
        let c = mgf_curve(&y, &alphas, 5).unwrap();
        let exact_c4 = 1.0 / 4.0;
        let exact_c2 = 1.0 / 2.0;
        let exact = exact_c4 * 0.16 / exact_c2;
        assert!(c.quartic_ratio.unwrap() > 0.5 * exact, "{:?}", c.quartic_ratio);
    }

    #[test]
    fn exp_moment_basics() {
        let y = normals(10_000, 1.0, 6);
        let zero = exp_moment(&y, 0.0, 6).unwrap();
        assert_eq!(zero.estimate.mean, 1.0);
        let m = exp_moment(&y, 0.5, 6).unwrap();
        assert!(m.estimate.within((0.125f64).exp(), 4.0));
        assert!(m.reliable && m.ci_low < m.estimate.mean && m.ci_high > m.estimate.mean);
        // one dominant sample collapses the effective size
        let mut spike = y.clone();
        spike[0] = 200.0;
        let s = exp_moment(&spike, 0.5, 6).unwrap();
        assert!(!s.reliable && s.ess < 2.0);
        assert!(s.estimate.mean.is_finite());
        assert!(exp_moment(&y[..10], 0.5, 6).is_err());
    }

    fn quartic() -> crate::ExactWick {
        wick_order(&Polynomial::<Rational>::parse("0,0,0,0,1").unwrap())
    }

    #[test]
    fn neg_exp_moment_rows() {
        let p = quartic();
        let kd = KernelDecomposition::default();
        let d = GridDomain::unit_square(4).unwrap();
        let s = FieldSampler::new(&kd, &d, 2.0).unwrap();
        let zero = neg_exp_moment(0.0, &[1.0, 2.0], &s, &p, 500, 3).unwrap();
        assert!(zero.iter().all(|r| r.moment.estimate.mean == 1.0 && r.jensen_ok));
        let rows = neg_exp_moment(0.05, &[1.0, 2.0], &s, &p, 4000, 3).unwrap();
        for r in &rows {
            assert!(r.jensen_ok && r.moment.reliable, "{r:?}");
        }
        assert!(neg_exp_moment(0.3, &[1.0], &s, &p, 500, 3).is_err());
    }

    #[test]
    fn qv_bound_behaviour() {
        let p = quartic();
        let cone = calibrate_cone(&p, 50.0, &[]).unwrap();
        let kd = KernelDecomposition::default();
        let d = GridDomain::unit_square(8).unwrap();
        let c = SpatialRule::Continuum;
        assert_eq!(qv_bound(&p, &cone, &kd, &d, 0.0, c).unwrap(), 0.0);
        let q5 = qv_bound(&p, &cone, &kd, &d, 5.0, c).unwrap();
        let q10 = qv_bound(&p, &cone, &kd, &d, 10.0, c).unwrap();
        assert!(q10 >= q5 && (q10 - q5) / q5 < 0.05, "{q5} {q10}");
        let q20 = qv_bound(&p, &cone, &kd, &d, 20.0, c).unwrap();
        let q40 = qv_bound(&p, &cone, &kd, &d, 40.0, c).unwrap();
        assert!(q40.is_finite() && (q40 - q20) / q20 < 0.1);
        // the grid rule keeps the diagonal, so it grows without bound
        let g5 = qv_bound(&p, &cone, &kd, &d, 5.0, SpatialRule::GridPairs).unwrap();
        let g10 = qv_bound(&p, &cone, &kd, &d, 10.0, SpatialRule::GridPairs).unwrap();
        assert!(g10 > 1.5 * g5);
    }

    #[test]
    fn realized_qv_below_bound() {
        let p = quartic();
        let cone = calibrate_cone(&p, 50.0, &[]).unwrap();
        let kd = KernelDecomposition::default();
        let d = GridDomain::unit_square(4).unwrap();
        let s = FieldSampler::new(&kd, &d, 2.0).unwrap();
        let q = qv_check(&s, &p, &cone, &kd, 2.0, 2000, 9).unwrap();
        assert!(q.holds && q.realized.mean > 0.0, "{q:?}");
    }

    proptest! {
        #[test]
        fn derivative_sup_dominates(s in 0.0f64..10.0, frac in -1.0f64..=1.0) {
            let p = wick_order(&Polynomial::<Rational>::parse("0,0,1,0,1").unwrap());
            let cone = ConeConfig::with_offset(3.0);
            let v = frac * cone.g(s);
            prop_assert!(p.eval_dx(v, s).abs() <= derivative_sup(&p, &cone, s).unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn log_mgf_is_shift_covariant(c in -50.0f64..50.0, a in -0.3f64..0.3) {
            let y = normals(1000, 1.0, 7);
            let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
            let (v0, s0, _) = log_mean_exp(&y, a);
            let (v1, s1, _) = log_mean_exp(&shifted, a);
            prop_assert!((v1 - v0 - a * c).abs() < 1e-9);
            prop_assert!((s1 - s0).abs() < 1e-9);
        }
    }
}
