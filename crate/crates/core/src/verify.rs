//! The acceptance suite: fifteen end-to-end checks, each run at its stated
//! tolerance and reported as one PASS/FAIL line.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::coupling::{
    envelope_start_decay, lipschitz_probe, line_hit_mc, line_hit_prob, tau_scaling, two_boundary_mc,
    two_boundary_prob, two_boundary_prob_mirrored,
};
use crate::envelope::{calibrate_cone, verify_cone, zero_envelope, ConeConfig};
use crate::estimators::{exp_martingale_check, mgf_curve, neg_exp_moment};
use crate::gff::{
    field_barriers, field_runs, k_cumulative, kernel_report, sample_field, FieldSampler, GridDomain,
    KernelDecomposition,
};
use crate::paths::{
    hitting_counts, simulate_functionals, summarize, sup_tail, sup_tail_bound, tolerance, SimConfig,
};
use crate::rng::{derive_seed, stream};
use crate::stats::{par_map, Moments};
use crate::wickpoly::{wick_order, Polynomial};
use crate::{ExactWick, Rational, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Sample sizes divided by 100, for smoke runs.
    Quick,
    Full,
}

impl Profile {
    /// Scaled sample size, never below `floor`.
    pub fn n(self, full: u64, floor: u64) -> u64 {
        match self {
            Profile::Full => full,
            Profile::Quick => (full / 100).max(floor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub profile: Profile,
    pub seed: u64,
    pub results: Vec<CriterionResult>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(
                s,
                "{} {:>2} {:<28} {:>7.1}s  {}",
                if r.pass { "PASS" } else { "FAIL" },
                r.id,
                r.name,
                r.seconds,
                r.detail
            );
        }
        let passed = self.results.iter().filter(|r| r.pass).count();
        let _ = writeln!(s, "{passed}/{} passed", self.results.len());
        s
    }
}

pub const CRITERIA: [(u32, &str); 15] = [
    (1, "wick-centering"),
    (2, "envelope-closed-form"),
    (3, "cone-calibration"),
    (4, "hitting-count-bound"),
    (5, "markov-halving"),
    (6, "gaussian-tail-bound"),
    (7, "per-path-inequality"),
    (8, "drifted-line-hitting"),
    (9, "tau-coupling-linearity"),
    (10, "lipschitz-growth"),
    (11, "kernel-decomposition"),
    (12, "field-covariance"),
    (13, "exponential-martingale"),
    (14, "dl-concentration"),
    (15, "negative-exp-moment"),
];

fn parse(coeffs: &str) -> ExactWick {
    wick_order(&Polynomial::<Rational>::parse(coeffs).expect("built-in polynomial"))
}

fn quartic() -> Result<(ExactWick, ConeConfig)> {
    let p = parse("0,0,0,0,1");
    let cone = calibrate_cone(&p, 50.0, &[])?;
    Ok((p, cone))
}

/// `(pass, detail)` for criterion `id`.
fn check(id: u32, profile: Profile, seed: u64) -> Result<(bool, String)> {
    let seed = derive_seed(seed, &format!("criterion-{id}"));
    match id {
        1 => {
            let p = parse("0,0,0,0,1");
            let n = profile.n(200_000, 1000);
            let mut ok = true;
            let mut detail = Vec::new();
            for (k, t) in [0.5f64, 1.0, 2.0].into_iter().enumerate() {
                let s = derive_seed(seed, &k.to_string());
                let m: Moments = par_map(n, |i| {
                    let b = t.sqrt() * stream(s, i).sample::<f64, _>(StandardNormal);
                    p.eval(b, t)
                })
                .into_iter()
                .collect();
                let e = m.estimate(s);
                ok &= e.within(0.0, 4.0);
                detail.push(format!("t={t}: z={:+.2}", e.z_score(0.0)));
            }
            Ok((ok, detail.join(", ")))
        }
        2 => {
            let p = parse("0,0,0,0,1");
            let mut worst = 0.0f64;
            for t in [0.1, 1.0, 10.0, 100.0] {
                let f: f64 = zero_envelope(&p, t)?;
                worst = worst.max((f * f - (3.0 + 6f64.sqrt()) * t).abs() / t);
            }
            Ok((worst <= 1e-9, format!("max relative error {worst:.2e}")))
        }
        3 => {
            let mut detail = Vec::new();
            let mut ok = true;
            for poly in ["0,0,0,0,1", "0,0,0,0,0,0,1", "0,0,1,0,1"] {
                let p = parse(poly);
                let cone = calibrate_cone(&p, 50.0, &[])?;
                let verified = verify_cone(&p, &cone, 50.0).is_ok();
                ok &= verified;
                detail.push(format!("[{poly}] A={}", cone.a));
            }
            Ok((ok, detail.join(", ")))
        }
        4 | 5 => {
            let (p, cone) = quartic()?;
            let cfg = SimConfig::new(1e-3, 4.0, profile.n(100_000, 1000), seed)?;
            let stats = hitting_counts(&cfg, &p, &cone, 4)?;
            if id == 4 {
                let rows: Vec<_> = stats.rows.iter().filter(|r| r.m >= 2).collect();
                let ok = rows.iter().all(|r| r.mean <= r.bound + 3.0 * r.stderr);
                let detail = rows
                    .iter()
                    .map(|r| format!("m={}: {:.2e} vs {:.2e}", r.m, r.mean, r.bound))
                    .collect::<Vec<_>>()
                    .join(", ");
                Ok((ok, detail))
            } else {
                let ok = stats
                    .halving
                    .iter()
                    .all(|h| h.ratio.map_or(true, |r| r <= 0.5 + 3.0 * h.stderr));
                let detail = stats
                    .halving
                    .iter()
                    .map(|h| match h.ratio {
                        Some(r) => format!("k={}: {r:.3}±{:.3} ({} windows)", h.k, h.stderr, h.at_least_k),
                        None => format!("k={}: no windows", h.k),
                    })
                    .collect::<Vec<_>>()
                    .join(", ");
                Ok((ok, detail))
            }
        }
        6 => {
            let mut ok = true;
            let mut detail = Vec::new();
            for m in [1.0, 2.0, 4.0] {
                let cfg = SimConfig::new(1e-3, 4.0, profile.n(100_000, 1000), derive_seed(seed, &m.to_string()))?;
                let e = sup_tail(&cfg, m)?;
                let bound = sup_tail_bound(m);
                ok &= e.mean <= bound + 3.0 * e.stderr;
                detail.push(format!("m={m}: {:.4} vs {bound:.4}", e.mean));
            }
            Ok((ok, detail.join(", ")))
        }
        7 => {
            let (p, cone) = quartic()?;
            let cfg = SimConfig::new(1e-3, 40.0, profile.n(10_000, 100), seed)?;
            let tol = tolerance(cfg.dt, cfg.t_max, p.half_degree());
            let f = simulate_functionals(&cfg, &p, &cone)?;
            let s = summarize(&f, tol, seed);
            let ok = s.inequality_fraction >= 0.99 && s.high_violations == 0;
            Ok((
                ok,
                format!(
                    "inequality on {:.2}% of paths, d_H > tol on {} (max d_H {:.1}, tol {:.1}, {} paths end HIGH)",
                    100.0 * s.inequality_fraction,
                    s.high_violations,
                    s.max_d_h,
                    tol,
                    s.paths_ending_high
                ),
            ))
        }
        8 => {
            let n = profile.n(100_000, 1000);
            let cfg = SimConfig::new(1e-2, 50.0, n, seed)?;
            let line = line_hit_mc(-0.5, &cfg)?;
            let exact = line_hit_prob(-0.5)?;
            let mut ok = line.within(exact, 3.0);
            let mut detail = vec![format!("line z=-0.5: {:.4}±{:.4} vs {exact:.4}", line.mean, line.stderr)];
            let l = -1.0;
            for (k, z) in [-0.25, -0.5, -0.75].into_iter().enumerate() {
                let c = SimConfig {
                    seed: derive_seed(seed, &format!("two-{k}")),
                    ..cfg
                };
                let down = two_boundary_mc(z, l, -1.0, &c)?;
                let up = two_boundary_mc(z, l, 1.0, &c)?;
                let (ed, eu) = (two_boundary_prob(z, l)?, two_boundary_prob_mirrored(z, l)?);
                ok &= down.within(ed, 3.0) && up.within(eu, 3.0);
                detail.push(format!(
                    "z={z}: z-scores {:+.2} (drift −1), {:+.2} (drift +1)",
                    down.z_score(ed),
                    up.z_score(eu)
                ));
            }
            Ok((ok, detail.join("; ")))
        }
        9 => {
            let (p, cone) = quartic()?;
            let cfg = SimConfig::new(1e-3, 1.0, profile.n(100_000, 1000), seed)?;
            let s = tau_scaling(&[0.05, 0.1, 0.2], 0.0, &cfg, &p, &cone, 1.0)?;
            let ok = s.fit.r_squared > 0.95 && s.fit.intercept.abs() <= 2.0 * s.fit.intercept_se;
            Ok((
                ok,
                format!(
                    "R²={:.4}, intercept {:.2e}±{:.2e}, P/gap ∈ [{}]",
                    s.fit.r_squared,
                    s.fit.intercept,
                    s.fit.intercept_se,
                    s.rows.iter().map(|r| format!("{:.3}", r.ratio)).collect::<Vec<_>>().join(", ")
                ),
            ))
        }
        10 => {
            let (p, cone) = quartic()?;
            let cfg = SimConfig::new(1e-2, 20.0, profile.n(50_000, 500), seed)?;
            let mut c = Vec::new();
            for t in [0.0, 1.0, 2.0] {
                let g = cone.g(t);
                let grid: Vec<f64> = (0..5).map(|k| g * (0.2 + 0.1 * k as f64)).collect();
                c.push(lipschitz_probe(t, &grid, &cfg, &p, &cone)?.c_t);
            }
            let spread = c.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                / c.iter().copied().fold(f64::INFINITY, f64::min);
            let dcfg = SimConfig {
                n_paths: profile.n(100_000, 1000),
                seed: derive_seed(seed, "decay"),
                ..cfg
            };
            let decay = envelope_start_decay(&[2.0, 4.0, 8.0], &dcfg, &p, &cone)?;
            let decreasing = decay.windows(2).all(|w| w[1].f.mean < w[0].f.mean);
            Ok((
                spread <= 3.0 && decreasing,
                format!(
                    "C_t = {} (spread {spread:.2}); F(f(s)) at s=2,4,8: {}",
                    c.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", "),
                    decay
                        .iter()
                        .map(|d| format!("{:.1}±{:.1}", d.f.mean, d.f.stderr))
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            ))
        }
        11 => {
            let kd = KernelDecomposition::default();
            let r = kernel_report(&kd, &GridDomain::unit_square(16)?, 20.0)?;
            let stable = r.beta_u_max_change.iter().all(|&c| c < 1e-6);
            let finite = r.beta.iter().all(|b| b.total.is_finite());
            let ok = r.gram_min_eigenvalue >= -1e-10
                && r.c_meas.is_finite()
                && r.log_window <= r.c_meas
                && stable
                && finite
                && r.divergence.diverging;
            Ok((
                ok,
                format!(
                    "min eig {:.1e}, C_meas {:.4}, log window {:.4}, β-change max {:.1e}, β=2 diverging: {}",
                    r.gram_min_eigenvalue,
                    r.c_meas,
                    r.log_window,
                    r.beta_u_max_change.iter().copied().fold(0.0, f64::max),
                    r.divergence.diverging
                ),
            ))
        }
        12 => {
            let kd = KernelDecomposition::default();
            let d = GridDomain::unit_square(4)?;
            let t = 2.0;
            let s = FieldSampler::new(&kd, &d, t)?;
            let n = profile.n(10_000, 1000);
            let fields = par_map(n, |i| sample_field(&s, t, seed, i).map(|f| f.values));
            let fields = fields.into_iter().collect::<Result<Vec<_>>>()?;
            let pts = d.points();
            let mut worst = 0.0f64;
            for i in 0..pts.len() {
                for j in i..pts.len() {
                    let r = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                    let e = fields.iter().map(|v| v[i] * v[j]).collect::<Moments>().estimate(seed);
                    worst = worst.max(e.z_score(k_cumulative(&kd, t, r)?).abs());
                }
            }
            Ok((worst <= 4.0, format!("max |z| over 136 entries {worst:.2}")))
        }
        13 => {
            let mut worst = 0.0f64;
            for lambda in [0.5, 1.0, 2.0] {
                for t in [1.0, 2.0] {
                    let cfg = SimConfig::new(1e-2, 2.0, profile.n(1_000_000, 1000), derive_seed(seed, &format!("{lambda}-{t}")))?;
                    worst = worst.max(exp_martingale_check(lambda, t, &cfg)?.z_score(1.0).abs());
                }
            }
            Ok((worst <= 4.0, format!("max |z| {worst:.2}")))
        }
        14 => {
            let (p, cone) = quartic()?;
            let kd = KernelDecomposition::default();
            let d = GridDomain::unit_square(8)?;
            let s = FieldSampler::new(&kd, &d, 4.0)?;
            let b = field_barriers(&s, &p, &cone, 4.0)?;
            let dl: Vec<f64> = field_runs(&s, &p, &b, profile.n(20_000, 1000), seed)
                .iter()
                .map(|r| r.d_l)
                .collect();
            let alphas: Vec<f64> = (-4..=4).map(|k| 0.05 * k as f64).collect();
            let curve = mgf_curve(&dl, &alphas, seed)?;
            let ratio = curve.quartic_ratio.unwrap_or(f64::INFINITY);
            let q = |t_max: f64, label: &str| -> Result<_> {
                let cfg = SimConfig::new(1e-2, t_max, profile.n(10_000, 1000), derive_seed(seed, label))?;
                let f = simulate_functionals(&cfg, &p, &cone)?;
                Ok(summarize(&f, 0.0, cfg.seed).q)
            };
            let (q20, q40) = (q(20.0, "q20")?, q(40.0, "q40")?);
            let z = (q20.mean - q40.mean) / (q20.stderr.powi(2) + q40.stderr.powi(2)).sqrt();
            let min_ess = curve.ess.iter().copied().fold(f64::INFINITY, f64::min);
            Ok((
                ratio < 0.2 && z.abs() <= 3.0,
                format!(
                    "Ĉ={:.1}, quartic/quadratic {ratio:.3}, min ESS {min_ess:.0}; E[q] {:.1}±{:.1} vs {:.1}±{:.1} (z={z:+.2})",
                    curve.quad_fit, q20.mean, q20.stderr, q40.mean, q40.stderr
                ),
            ))
        }
        15 => {
            let p = parse("0,0,0,0,1");
            let kd = KernelDecomposition::default();
            let s = FieldSampler::new(&kd, &GridDomain::unit_square(16)?, 6.0)?;
            let rows = neg_exp_moment(0.05, &[2.0, 4.0, 6.0], &s, &p, profile.n(4000, 200), seed)?;
            let reliable = rows
                .iter()
                .all(|r| r.moment.reliable && r.moment.estimate.mean.is_finite() && r.jensen_ok);
            let (a, b) = (&rows[1].moment, &rows[2].moment);
            let overlap = a.ci_low <= b.ci_high && b.ci_low <= a.ci_high;
            Ok((
                reliable && overlap,
                format!(
                    "exploratory; {}",
                    rows.iter()
                        .map(|r| format!(
                            "t={}: {:.3} [{:.3}, {:.3}] ESS {:.0}",
                            r.t, r.moment.estimate.mean, r.moment.ci_low, r.moment.ci_high, r.moment.ess
                        ))
                        .collect::<Vec<_>>()
                        .join("; ")
                ),
            ))
        }
        _ => Err(crate::Error::Config(format!("no criterion {id}"))),
    }
}

/// Runs criterion `id`; errors inside a check count as a failure.
pub fn run_criterion(id: u32, profile: Profile, seed: u64) -> CriterionResult {
    let name = CRITERIA
        .iter()
        .find(|(k, _)| *k == id)
        .map_or("unknown", |(_, n)| n);
    let start = Instant::now();
    let (pass, detail) = check(id, profile, seed).unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionResult {
        id,
        name,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every criterion, calling `each` as results arrive.
pub fn verify_all(profile: Profile, seed: u64, mut each: impl FnMut(&CriterionResult)) -> VerifyReport {
    let results = CRITERIA
        .iter()
        .map(|&(id, _)| {
            let r = run_criterion(id, profile, seed);
            each(&r);
            r
        })
        .collect();
    VerifyReport {
        profile,
        seed,
        results,
    }
}
