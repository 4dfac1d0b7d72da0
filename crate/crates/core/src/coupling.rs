//! Brownian couplings and first-passage laws used to control the Doob martingale
//! of the high-value sum.
//!
//! Motions started at time offset `t` see the shifted barriers `g(t + s)` and
//! `f_R(t + s)`. Their stopping sequence starts by looking for the envelope:
//! `L̄_1` is the first time in `E = {|x| ≤ f_R}`, `H̄_1` the next time in
//! `C = {|x| ≥ g}`, and so on.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::envelope::{zero_envelope, ConeConfig};
use crate::paths::{bridge_cross, steps_for, Barriers, Crossing, Regime, SimConfig, StoppingTracker};
use crate::rng::stream;
use crate::stats::{par_map, weighted_line_fit, LineFit, McEstimate, Moments};
use crate::wickpoly::WickPolynomial;
use crate::{Coefficient, Error, Result};

/// Outcome of one coupled pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingResult {
    /// Meeting time, if the motions met before the horizon.
    pub tau: Option<f64>,
    /// `min(H̄¹_1, H̄²_1, 1)`.
    pub t_cap: f64,
    /// First cone time of `B¹` / `B²`.
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    /// First time after `S1` that `B²` reaches the lower envelope branch.
    pub s2_prime: Option<f64>,
    /// `B¹` sat on the lower side of the cone at `S1`.
    pub s1_lower: Option<bool>,
    /// Largest `|B²_s − B¹_s − (z₂ − z₁)|` seen (parallel coupling only).
    pub gap_error: f64,
    pub hbar1: Vec<f64>,
    pub lbar1: Vec<f64>,
    pub hbar2: Vec<f64>,
    pub lbar2: Vec<f64>,
}

fn check_pair(z1: f64, z2: f64) -> Result<()> {
    if !(z1.is_finite() && z2.is_finite() && z1 <= z2) {
        return Err(Error::Domain(format!("need finite z1 ≤ z2, got {z1}, {z2}")));
    }
    Ok(())
}

fn check_inside(z: f64, cone: &ConeConfig, t: f64) -> Result<()> {
    if z.abs() >= cone.g(t) {
        return Err(Error::Domain(format!(
            "start {z} is not inside the cone g({t}) = {}",
            cone.g(t)
        )));
    }
    Ok(())
}

/// Both motions independent until they meet, identical afterwards. The meeting
/// test inside a step uses the bridge of the difference (variance rate 2).
pub fn independent_coupling<T: Coefficient>(
    z1: f64,
    z2: f64,
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    t_offset: f64,
    index: u64,
) -> Result<CouplingResult> {
    cfg.validate()?;
    check_pair(z1, z2)?;
    check_inside(z1, cone, t_offset)?;
    check_inside(z2, cone, t_offset)?;
    let b = Barriers::new(p, cone, t_offset, cfg.dt, cfg.steps())?;
    let mut rng = stream(cfg.seed, index);
    let sd = cfg.dt.sqrt();
    let (mut x1, mut x2) = (z1, z2);
    let mut tau = (z1 == z2).then_some(0.0);
    let mut tr = [StoppingTracker::new(Regime::High), StoppingTracker::new(Regime::High)];
    let mut res = CouplingResult {
        tau: None,
        t_cap: 1.0,
        s1: None,
        s2: None,
        s2_prime: None,
        s1_lower: None,
        gap_error: 0.0,
        hbar1: Vec::new(),
        lbar1: Vec::new(),
        hbar2: Vec::new(),
        lbar2: Vec::new(),
    };
    for i in 0..=b.steps() {
        let s = i as f64 * cfg.dt;
        for (j, x) in [x1, x2].into_iter().enumerate() {
            let (h, l) = if j == 0 {
                (&mut res.hbar1, &mut res.lbar1)
            } else {
                (&mut res.hbar2, &mut res.lbar2)
            };
            match tr[j].observe(i, x, &b) {
                Some(Crossing::Cone(_)) => h.push(s),
                Some(Crossing::Envelope(_)) => l.push(s),
                None => {}
            }
        }
        if i == b.steps() {
            break;
        }
        let d1 = sd * rng.sample::<f64, _>(StandardNormal);
        if tau.is_some() {
            x1 += d1;
            x2 = x1;
            continue;
        }
        let d2 = sd * rng.sample::<f64, _>(StandardNormal);
        let u: f64 = rng.gen();
        let (gap0, n1, n2) = (x2 - x1, x1 + d1, x2 + d2);
        let gap1 = n2 - n1;
        if gap1 <= 0.0 || u < bridge_cross(gap0, gap1, 2.0 * cfg.dt) {
            tau = Some(s + cfg.dt);
            x1 = n1;
            x2 = n1;
        } else {
            x1 = n1;
            x2 = n2;
        }
    }
    res.tau = tau;
    res.t_cap = [res.hbar1.first(), res.hbar2.first()]
        .into_iter()
        .flatten()
        .fold(1.0f64, |m, &h| m.min(h));
    Ok(res)
}

/// `1{τ > T_cap}` for one pair, simulated only up to `min(τ, T_cap) ≤ 1`.
fn tau_exceeds_cap<R: Rng>(rng: &mut R, z1: f64, z2: f64, b: &Barriers) -> bool {
    if z1 == z2 {
        return false;
    }
    let dt = b.dt();
    let sd = dt.sqrt();
    let steps = steps_for(1.0, dt).min(b.steps());
    let mut tr = [StoppingTracker::new(Regime::High), StoppingTracker::new(Regime::High)];
    let (mut x1, mut x2) = (z1, z2);
    for i in 0..=steps {
        let hit1 = matches!(tr[0].observe(i, x1, b), Some(Crossing::Cone(_)));
        let hit2 = matches!(tr[1].observe(i, x2, b), Some(Crossing::Cone(_)));
        if hit1 || hit2 || i == steps {
            // T_cap reached before the motions met
            return true;
        }
        let n1 = x1 + sd * rng.sample::<f64, _>(StandardNormal);
        let n2 = x2 + sd * rng.sample::<f64, _>(StandardNormal);
        let u: f64 = rng.gen();
        let (gap0, gap1) = (x2 - x1, n2 - n1);
        if gap1 <= 0.0 || u < bridge_cross(gap0, gap1, 2.0 * dt) {
            return false;
        }
        x1 = n1;
        x2 = n2;
    }
    true
}

/// Monte Carlo `P[τ > T_cap]` for starts `z1 ≤ z2` at time offset `t_offset`.
pub fn tau_exceedance<T: Coefficient>(
    z1: f64,
    z2: f64,
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    t_offset: f64,
) -> Result<McEstimate> {
    cfg.validate()?;
    check_pair(z1, z2)?;
    check_inside(z1, cone, t_offset)?;
    check_inside(z2, cone, t_offset)?;
    let b = Barriers::new(p, cone, t_offset, cfg.dt, steps_for(1.0, cfg.dt))?;
    let m: Moments = par_map(cfg.n_paths, |i| {
        tau_exceeds_cap(&mut stream(cfg.seed, i), z1, z2, &b) as u8 as f64
    })
    .into_iter()
    .collect();
    Ok(m.estimate(cfg.seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauRow {
    pub gap: f64,
    pub estimate: McEstimate,
    /// `estimate / gap`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauScaling {
    pub rows: Vec<TauRow>,
    pub fit: LineFit,
    /// Largest over smallest `P[τ > T_cap] / gap`.
    pub ratio_spread: f64,
}

/// `P[τ > T_cap]` for pairs `center ± gap/2`, with a weighted line fit against the gap.
pub fn tau_scaling<T: Coefficient>(
    gaps: &[f64],
    center: f64,
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    t_offset: f64,
) -> Result<TauScaling> {
    if gaps.len() < 2 || gaps.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::Config("need at least two positive gaps".into()));
    }
    let rows = gaps
        .iter()
        .enumerate()
        .map(|(k, &gap)| {
            let c = SimConfig {
                seed: crate::rng::derive_seed(cfg.seed, &format!("tau-{k}")),
                ..*cfg
            };
            let est = tau_exceedance(center - gap / 2.0, center + gap / 2.0, &c, p, cone, t_offset)?;
            Ok(TauRow {
                gap,
                estimate: est,
                ratio: est.mean / gap,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.estimate.mean).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.estimate.stderr).collect();
    let fit = weighted_line_fit(&x, &y, &s);
    let hi = rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
    let lo = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    Ok(TauScaling {
        rows,
        fit,
        ratio_spread: hi / lo,
    })
}

/// Parallel coupling `B² = B¹ + (z₂ − z₁)`: one noise sequence drives both.
pub fn parallel_exit<T: Coefficient>(
    z1: f64,
    z2: f64,
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    t_offset: f64,
    index: u64,
) -> Result<CouplingResult> {
    cfg.validate()?;
    check_pair(z1, z2)?;
    check_inside(z1, cone, t_offset)?;
    check_inside(z2, cone, t_offset)?;
    let b = Barriers::new(p, cone, t_offset, cfg.dt, cfg.steps())?;
    Ok(parallel_run(&mut stream(cfg.seed, index), z1, z2, &b, true))
}

fn parallel_run<R: Rng>(rng: &mut R, z1: f64, z2: f64, b: &Barriers, full: bool) -> CouplingResult {
    let gap = z2 - z1;
    let sd = b.dt().sqrt();
    let mut res = CouplingResult {
        tau: (gap == 0.0).then_some(0.0),
        t_cap: 1.0,
        s1: None,
        s2: None,
        s2_prime: None,
        s1_lower: None,
        gap_error: 0.0,
        hbar1: Vec::new(),
        lbar1: Vec::new(),
        hbar2: Vec::new(),
        lbar2: Vec::new(),
    };
    let mut x1 = z1;
    for i in 0..=b.steps() {
        let s = i as f64 * b.dt();
        let x2 = x1 + gap;
        res.gap_error = res.gap_error.max(((x2 - x1) - gap).abs());
        let g = b.g(i);
        if res.s1.is_none() && x1.abs() >= g {
            res.s1 = Some(s);
            res.s1_lower = Some(x1 < 0.0);
        }
        if res.s2.is_none() && x2.abs() >= g {
            res.s2 = Some(s);
        }
        if let (Some(s1), None, None) = (res.s1, res.s2_prime, res.s2) {
            if s > s1 && x2 >= -b.f(i) {
                res.s2_prime = Some(s);
            }
        }
        let settled = res.s1.is_some() && res.s2.is_some();
        if (!full && settled) || i == b.steps() {
            break;
        }
        x1 += sd * rng.sample::<f64, _>(StandardNormal);
    }
    res
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParallelSummary {
    pub n: u64,
    pub s1_before_s2: u64,
    /// Among `S1 < S2`: exits of `B¹` through the lower cone branch.
    pub lower_exits: u64,
    /// Among `S1 < S2`: `B²` reached the lower envelope branch first.
    pub envelope_first: u64,
    /// Among `S1 < S2`: `B²` reached the lower cone branch first.
    pub cone_first: u64,
    /// Among `S1 < S2`: neither before the horizon.
    pub censored: u64,
    pub max_gap_error: f64,
    /// `1{S1 ≤ horizon} P_R(g(t + S1); t + S1)`.
    pub e1: McEstimate,
    pub e2: McEstimate,
    /// Paired difference `e1 − e2`.
    pub diff: McEstimate,
}

fn cone_payoff<T: Coefficient>(p: &WickPolynomial<T>, cone: &ConeConfig, t: f64, s: Option<f64>) -> f64 {
    s.map_or(0.0, |s| p.eval(cone.g(t + s), t + s))
}

/// Parallel-coupling statistics over `cfg.n_paths` pairs.
pub fn parallel_summary<T: Coefficient>(
    z1: f64,
    z2: f64,
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    t_offset: f64,
) -> Result<ParallelSummary> {
    cfg.validate()?;
    check_pair(z1, z2)?;
    check_inside(z1, cone, t_offset)?;
    check_inside(z2, cone, t_offset)?;
    let b = Barriers::new(p, cone, t_offset, cfg.dt, cfg.steps())?;
    let runs = par_map(cfg.n_paths, |i| parallel_run(&mut stream(cfg.seed, i), z1, z2, &b, false));
    let ordered: Vec<&CouplingResult> = runs
        .iter()
        .filter(|r| matches!((r.s1, r.s2), (Some(a), Some(b)) if a < b) || (r.s1.is_some() && r.s2.is_none()))
        .collect();
    let count = |f: &dyn Fn(&CouplingResult) -> bool| ordered.iter().filter(|r| f(r)).count() as u64;
    let e1: Moments = runs.iter().map(|r| cone_payoff(p, cone, t_offset, r.s1)).collect();
    let e2: Moments = runs.iter().map(|r| cone_payoff(p, cone, t_offset, r.s2)).collect();
    let diff: Moments = runs
        .iter()
        .map(|r| cone_payoff(p, cone, t_offset, r.s1) - cone_payoff(p, cone, t_offset, r.s2))
        .collect();
    Ok(ParallelSummary {
        n: cfg.n_paths,
        s1_before_s2: ordered.len() as u64,
        lower_exits: count(&|r| r.s1_lower == Some(true)),
        envelope_first: count(&|r| r.s2_prime.is_some()),
        cone_first: count(&|r| r.s2.is_some() && r.s2_prime.is_none()),
        censored: count(&|r| r.s2.is_none() && r.s2_prime.is_none()),
        max_gap_error: runs.iter().map(|r| r.gap_error).fold(0.0, f64::max),
        e1: e1.estimate(cfg.seed),
        e2: e2.estimate(cfg.seed),
        diff: diff.estimate(cfg.seed),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AbsoluteBoundRow {
    pub t: f64,
    pub diff: McEstimate,
    /// `|e1 − e2| / (|z₂ − z₁| e^{t/2})`.
    pub c_t: f64,
}

/// `|E[1{S1<∞}P_R(g(t+S1))] − E[1{S2<∞}P_R(g(t+S2))]| / |z₂ − z₁|` against `e^{t/2}`.
pub fn absolute_bound_probe<T: Coefficient>(
    z1: f64,
    z2: f64,
    t_list: &[f64],
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
) -> Result<Vec<AbsoluteBoundRow>> {
    if z1 >= z2 {
        return Err(Error::Domain("need z1 < z2".into()));
    }
    t_list
        .iter()
        .map(|&t| {
            let s = parallel_summary(z1, z2, cfg, p, cone, t)?;
            Ok(AbsoluteBoundRow {
                t,
                diff: s.diff,
                c_t: s.diff.mean.abs() / ((z2 - z1) * (t / 2.0).exp()),
            })
        })
        .collect()
}

/// `P_z[∃s: B_s = s] = e^{2z}` for `z ≤ 0`.
pub fn line_hit_prob(z: f64) -> Result<f64> {
    if !(z <= 0.0) {
        return Err(Error::Domain(format!("line_hit_prob needs z ≤ 0, got {z}")));
    }
    Ok((2.0 * z).exp())
}

/// Paths of `z + B_s − s` are dropped once they fall this far below the line;
/// the chance of coming back is `e^{−20}`.
pub const LINE_KILL_LEVEL: f64 = -10.0;

/// Monte Carlo of `P_z[∃s ≤ t_max: B_s = s]` with a bridge-corrected crossing test.
pub fn line_hit_mc(z: f64, cfg: &SimConfig) -> Result<McEstimate> {
    line_hit_prob(z)?;
    cfg.validate()?;
    let steps = cfg.steps();
    let m: Moments = par_map(cfg.n_paths, |idx| {
        let mut rng = stream(cfg.seed, idx);
        let sd = cfg.dt.sqrt();
        let mut y = z;
        if y >= 0.0 {
            return 1.0;
        }
        for _ in 0..steps {
            let w = y - cfg.dt + sd * rng.sample::<f64, _>(StandardNormal);
            let u: f64 = rng.gen();
            if w >= 0.0 || u < bridge_cross(-y, -w, cfg.dt) {
                return 1.0;
            }
            if w < LINE_KILL_LEVEL {
                return 0.0;
            }
            y = w;
        }
        0.0
    })
    .into_iter()
    .collect();
    Ok(m.estimate(cfg.seed))
}

fn check_two_boundary(z: f64, l: f64) -> Result<()> {
    if !(l < 0.0) {
        return Err(Error::Domain(format!("lower boundary must be negative, got {l}")));
    }
    if !(z >= l && z <= 0.0) {
        return Err(Error::Domain(format!("start must lie in [{l}, 0], got {z}")));
    }
    Ok(())
}

/// Probability that `z + B_s − s` reaches `l < 0` before `0`:
/// `(1 − e^{2z}) / (1 − e^{2l})`, the solution of `u'' − 2u' = 0`, `u(0) = 0`, `u(l) = 1`.
pub fn two_boundary_prob(z: f64, l: f64) -> Result<f64> {
    check_two_boundary(z, l)?;
    Ok((-(2.0 * z).exp_m1()) / (-(2.0 * l).exp_m1()))
}

/// The mirrored law `(1 − e^{−2z}) / (1 − e^{−2l})`: probability that `z + B_s + s`
/// reaches `l` before `0`. It solves `u'' + 2u' = 0` with the same boundary values.
pub fn two_boundary_prob_mirrored(z: f64, l: f64) -> Result<f64> {
    check_two_boundary(z, l)?;
    Ok((-2.0 * z).exp_m1() / (-2.0 * l).exp_m1())
}

/// Slope bound `C = 2 / (1 − e^{−2|l|})` with `|u(z)| ≤ C|z|` near `0`.
pub fn two_boundary_slope(l: f64) -> f64 {
    2.0 / (-(-2.0 * l.abs()).exp_m1())
}

/// Monte Carlo of the probability that `z + B_s + drift·s` reaches `l` before `0`.
pub fn two_boundary_mc(z: f64, l: f64, drift: f64, cfg: &SimConfig) -> Result<McEstimate> {
    check_two_boundary(z, l)?;
    cfg.validate()?;
    let steps = cfg.steps();
    let m: Moments = par_map(cfg.n_paths, |idx| {
        let mut rng = stream(cfg.seed, idx);
        let sd = cfg.dt.sqrt();
        let mut y = z;
        if y <= l {
            return 1.0;
        }
        if y >= 0.0 {
            return 0.0;
        }
        for _ in 0..steps {
            let w = y + drift * cfg.dt + sd * rng.sample::<f64, _>(StandardNormal);
            let (u_top, u_bottom): (f64, f64) = (rng.gen(), rng.gen());
            if w >= 0.0 || u_top < bridge_cross(-y, -w, cfg.dt) {
                return 0.0;
            }
            if w <= l || u_bottom < bridge_cross(y - l, w - l, cfg.dt) {
                return 1.0;
            }
            y = w;
        }
        f64::NAN
    })
    .into_iter()
    .collect();
    if !m.mean().is_finite() {
        return Err(Error::Numerical(format!(
            "some paths did not leave ({l}, 0) by t_max = {}",
            cfg.t_max
        )));
    }
    Ok(m.estimate(cfg.seed))
}

/// Sum of `P_R(g(t + H̄_i); t + H̄_i)` over the stopping sequence of one motion.
fn high_value_sum<T: Coefficient, R: Rng>(
    rng: &mut R,
    z: f64,
    p: &WickPolynomial<T>,
    b: &Barriers,
) -> f64 {
    let sd = b.dt().sqrt();
    let mut tr = StoppingTracker::new(Regime::High);
    let mut x = z;
    let mut sum = 0.0;
    for i in 0..=b.steps() {
        if let Some(Crossing::Cone(t)) = tr.observe(i, x, b) {
            sum += p.eval(b.g(i), t);
        }
        x += sd * rng.sample::<f64, _>(StandardNormal);
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbePoint {
    pub z: f64,
    pub f: McEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeSlope {
    pub z_left: f64,
    pub z_right: f64,
    /// `(F(z_right) − F(z_left)) / (z_right − z_left)` from paired replicas.
    pub slope: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzProbe {
    pub t: f64,
    pub points: Vec<ProbePoint>,
    pub slopes: Vec<ProbeSlope>,
    pub mean_abs_slope: f64,
    /// Least-squares slope of `F` across the whole grid, paired per replica.
    pub fit_slope: McEstimate,
    /// `|fit_slope| / e^{t/2}`.
    pub c_t: f64,
    /// `F` increases with `|z|` along the grid.
    pub monotone_in_abs_z: bool,
}

/// `F(z) = E_z[Σ_i 1{H̄_i ≤ horizon} P_R(g(t + H̄_i))]` on a grid of starts, with
/// common random numbers across the grid so finite differences are paired.
pub fn lipschitz_probe<T: Coefficient>(
    t: f64,
    z_grid: &[f64],
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
) -> Result<LipschitzProbe> {
    cfg.validate()?;
    if z_grid.len() < 2 || z_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("z grid needs at least two increasing points".into()));
    }
    for &z in z_grid {
        check_inside(z, cone, t)?;
    }
    let b = Barriers::new(p, cone, t, cfg.dt, cfg.steps())?;
    let samples: Vec<Vec<f64>> = par_map(cfg.n_paths, |i| {
        z_grid
            .iter()
            .map(|&z| high_value_sum(&mut stream(cfg.seed, i), z, p, &b))
            .collect()
    });
    let points: Vec<ProbePoint> = z_grid
        .iter()
        .enumerate()
        .map(|(k, &z)| ProbePoint {
            z,
            f: samples.iter().map(|s| s[k]).collect::<Moments>().estimate(cfg.seed),
        })
        .collect();
    let slopes: Vec<ProbeSlope> = (1..z_grid.len())
        .map(|k| {
            let h = z_grid[k] - z_grid[k - 1];
            ProbeSlope {
                z_left: z_grid[k - 1],
                z_right: z_grid[k],
                slope: samples
                    .iter()
                    .map(|s| (s[k] - s[k - 1]) / h)
                    .collect::<Moments>()
                    .estimate(cfg.seed),
            }
        })
        .collect();
    let mean_abs_slope = slopes.iter().map(|s| s.slope.mean.abs()).sum::<f64>() / slopes.len() as f64;
    let zbar = z_grid.iter().sum::<f64>() / z_grid.len() as f64;
    let szz: f64 = z_grid.iter().map(|z| (z - zbar).powi(2)).sum();
    let fit_slope = samples
        .iter()
        .map(|s| z_grid.iter().zip(s).map(|(z, y)| (z - zbar) * y).sum::<f64>() / szz)
        .collect::<Moments>()
        .estimate(cfg.seed);
    let mut by_abs: Vec<&ProbePoint> = points.iter().collect();
    by_abs.sort_by(|a, b| a.z.abs().total_cmp(&b.z.abs()));
    Ok(LipschitzProbe {
        t,
        monotone_in_abs_z: by_abs.windows(2).all(|w| w[1].f.mean >= w[0].f.mean),
        c_t: fit_slope.mean.abs() / (t / 2.0).exp(),
        mean_abs_slope,
        fit_slope,
        points,
        slopes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeStart {
    pub s: f64,
    pub z: f64,
    pub f: McEstimate,
}

/// `F(f_R(s))` at time offset `s`: the high-value sum started on the envelope.
pub fn envelope_start_decay<T: Coefficient>(
    s_list: &[f64],
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
) -> Result<Vec<EnvelopeStart>> {
    cfg.validate()?;
    s_list
        .iter()
        .map(|&s| {
            let z: f64 = zero_envelope(p, s)?;
            let b = Barriers::new(p, cone, s, cfg.dt, cfg.steps())?;
            let m: Moments = par_map(cfg.n_paths, |i| {
                high_value_sum(&mut stream(cfg.seed, i), z, p, &b)
            })
            .into_iter()
            .collect();
            Ok(EnvelopeStart {
                s,
                z,
                f: m.estimate(cfg.seed),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::calibrate_cone;
    use crate::wickpoly::{wick_order, Polynomial};
    use crate::Rational;
    use proptest::prelude::*;

    fn quartic() -> (WickPolynomial<Rational>, ConeConfig) {
        let p = wick_order(&Polynomial::<Rational>::parse("0,0,0,0,1").unwrap());
        let cone = calibrate_cone(&p, 50.0, &[0.5]).unwrap();
        (p, cone)
    }

    #[test]
    fn equal_starts_meet_at_once() {
        let (p, cone) = quartic();
        let cfg = SimConfig::new(1e-2, 2.0, 1, 3).unwrap();
        let r = independent_coupling(0.3, 0.3, &cfg, &p, &cone, 1.0, 0).unwrap();
        assert_eq!(r.tau, Some(0.0));
        assert_eq!(r.hbar1, r.hbar2);
        let r = parallel_exit(0.3, 0.3, &cfg, &p, &cone, 1.0, 0).unwrap();
        assert_eq!(r.s1, r.s2);
    }

    #[test]
    fn paths_coincide_after_meeting() {
        let (p, cone) = quartic();
        let cfg = SimConfig::new(1e-3, 3.0, 1, 8).unwrap();
        for idx in 0..20 {
            let r = independent_coupling(-0.05, 0.05, &cfg, &p, &cone, 0.5, idx).unwrap();
            if let Some(tau) = r.tau {
                // hitting times after τ agree
                let after = |v: &Vec<f64>| v.iter().copied().filter(|&s| s > tau).collect::<Vec<_>>();
                assert_eq!(after(&r.hbar1), after(&r.hbar2));
                assert_eq!(after(&r.lbar1), after(&r.lbar2));
            }
            assert!(r.t_cap <= 1.0);
        }
    }

    #[test]
    fn rejects_starts_outside_cone() {
        let (p, cone) = quartic();
        let cfg = SimConfig::new(1e-2, 2.0, 10, 3).unwrap();
        assert!(independent_coupling(0.0, 3.5, &cfg, &p, &cone, 0.0, 0).is_err());
        assert!(tau_exceedance(0.2, 0.1, &cfg, &p, &cone, 0.0).is_err());
    }

    #[test]
    fn tau_exceedance_is_small_for_small_gaps() {
        let (p, cone) = quartic();
        let cfg = SimConfig::new(1e-3, 2.0, 20_000, 5).unwrap();
        let e = tau_exceedance(-0.05, 0.05, &cfg, &p, &cone, 1.0).unwrap();
        // from the centre T_cap = 1 almost surely; P[|N(0, 2)| < 0.1] ≈ 0.0564
        let oracle = 2.0 * (0.5 - crate::stats::normal_sf(0.1 / 2f64.sqrt()));
        assert!(e.within(oracle, 4.0), "{e:?} vs {oracle}");
    }

    #[test]
    fn parallel_gap_and_geometry() {
        let (p, cone) = quartic();
        let cfg = SimConfig::new(1e-2, 20.0, 2000, 12).unwrap();
        let s = parallel_summary(-2.0, -1.8, &cfg, &p, &cone, 1.0).unwrap();
        assert!(s.max_gap_error <= 8.0 * f64::EPSILON * 40.0, "{}", s.max_gap_error);
        assert!(s.s1_before_s2 > 0);
        assert_eq!(s.lower_exits, s.s1_before_s2);
        assert_eq!(s.envelope_first + s.cone_first + s.censored, s.s1_before_s2);
    }

    #[test]
    fn line_hit_closed_form() {
        assert_eq!(line_hit_prob(0.0).unwrap(), 1.0);
        assert!((line_hit_prob(-0.5).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!(line_hit_prob(-40.0).unwrap() < 1e-30);
        assert!(line_hit_prob(0.1).is_err());
    }

    #[test]
    fn line_hit_mc_agrees() {
        let cfg = SimConfig::new(1e-3, 50.0, 10_000, 2).unwrap();
        let e = line_hit_mc(-0.5, &cfg).unwrap();
        assert!(e.within((-1f64).exp(), 4.0), "{e:?}");
        assert_eq!(line_hit_mc(0.0, &cfg).unwrap().mean, 1.0);
    }

    #[test]
    fn two_boundary_values() {
        let l = -1.0;
        assert_eq!(two_boundary_prob(0.0, l).unwrap(), 0.0);
        assert!((two_boundary_prob(l, l).unwrap() - 1.0).abs() < 1e-15);
        assert!((two_boundary_prob_mirrored(l, l).unwrap() - 1.0).abs() < 1e-15);
        assert!(two_boundary_prob(-0.5, 0.0).is_err());
        assert!(two_boundary_prob(0.5, -1.0).is_err());
        // slope at the reference line
        let h = 1e-7;
        let slope = two_boundary_prob(-h, l).unwrap() / h;
        assert!((slope - two_boundary_slope(l)).abs() < 1e-5);
    }

    /// Residual of `u'' + 2·drift·u' = 0` by central differences.
    fn ode_residual(u: impl Fn(f64) -> f64, z: f64, drift: f64) -> f64 {
        let h = 1e-4;
        let d1 = (u(z + h) - u(z - h)) / (2.0 * h);
        let d2 = (u(z + h) - 2.0 * u(z) + u(z - h)) / (h * h);
        d2 + 2.0 * drift * d1
    }

    #[test]
    fn two_boundary_generators() {
        let l = -1.5;
        for z in [-1.2, -0.7, -0.3] {
            let down = |z| two_boundary_prob(z, l).unwrap();
            let up = |z| two_boundary_prob_mirrored(z, l).unwrap();
            assert!(ode_residual(down, z, -1.0).abs() < 1e-5);
            assert!(ode_residual(up, z, 1.0).abs() < 1e-5);
            // the mirrored law does not solve the drift −1 equation
            assert!(ode_residual(up, z, -1.0).abs() > 0.1);
        }
    }

    #[test]
    fn two_boundary_mc_both_orientations() {
        let cfg = SimConfig::new(1e-3, 50.0, 8000, 4).unwrap();
        let l = -1.0;
        let z = -0.4;
        let down = two_boundary_mc(z, l, -1.0, &cfg).unwrap();
        assert!(down.within(two_boundary_prob(z, l).unwrap(), 4.0), "{down:?}");
        let up = two_boundary_mc(z, l, 1.0, &cfg).unwrap();
        assert!(up.within(two_boundary_prob_mirrored(z, l).unwrap(), 4.0), "{up:?}");
    }

    proptest! {
        #[test]
        fn two_boundary_is_a_probability(l in -5.0f64..-0.01, frac in 0.0f64..=1.0) {
            let z = frac * l;
            for u in [two_boundary_prob(z, l).unwrap(), two_boundary_prob_mirrored(z, l).unwrap()] {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&u));
            }
            prop_assert!(two_boundary_prob(z, l).unwrap() <= two_boundary_slope(l) * z.abs() + 1e-12);
        }

        #[test]
        fn line_hit_monotone(a in -10.0f64..0.0, b in -10.0f64..0.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(line_hit_prob(lo).unwrap() <= line_hit_prob(hi).unwrap());
        }
    }

    #[test]
    fn envelope_start_decays() {
        let (p, cone) = quartic();
        let cfg = SimConfig::new(1e-2, 15.0, 1500, 6).unwrap();
        let rows = envelope_start_decay(&[2.0, 8.0], &cfg, &p, &cone).unwrap();
        assert!(rows[0].f.mean > rows[1].f.mean, "{rows:?}");
    }

    #[test]
    fn probe_shapes() {
        let (p, cone) = quartic();
        let cfg = SimConfig::new(1e-2, 5.0, 200, 6).unwrap();
        let probe = lipschitz_probe(1.0, &[1.0, 1.5, 2.0], &cfg, &p, &cone).unwrap();
        assert_eq!(probe.points.len(), 3);
        assert_eq!(probe.slopes.len(), 2);
        assert!(probe.c_t.is_finite());
        assert!(lipschitz_probe(1.0, &[2.0, 1.0], &cfg, &p, &cone).is_err());
    }
}
