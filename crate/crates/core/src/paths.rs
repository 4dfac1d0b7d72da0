//! Single-site Brownian paths, the alternating cone/envelope stopping times and
//! the low/high decomposition of `P_R(B_t; t)`.
//!
//! A path starts in the LOW regime (`L_0 = 0`). It switches to HIGH at the first
//! grid time with `|B| ≥ g(t)` (a cone hit `H_k`) and back to LOW at the first
//! grid time with `|B| ≤ f_R(t)` (an envelope return `L_k`). Each grid step
//! `[t_i, t_{i+1}]` carries the regime in force after observing `B_{t_i}`.
//!
//! The LOW and HIGH sums integrate the step indicator against the exact step
//! increment `P_R(B_{t_{i+1}}; t_{i+1}) − P_R(B_{t_i}; t_i)` of the martingale.
//! For a polynomial this is the complete Itô–Taylor expansion of
//! `∫ P'_R(B_s; s) dB_s` over the step, so `d_t = P_R(B_0;0) + d_L + d_H` holds
//! exactly. The first-order sum `Σ P'_R ΔB` is kept as a diagnostic.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envelope::{envelope_on_grid, ConeConfig};
use crate::rng::stream;
use crate::stats::{par_map, McEstimate, Moments};
use crate::wickpoly::WickPolynomial;
use crate::{Coefficient, Error, Result};

/// Largest Euler step accepted anywhere in the simulation layers.
pub const MAX_DT: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_max: f64,
    pub n_paths: u64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(dt: f64, t_max: f64, n_paths: u64, seed: u64) -> Result<Self> {
        let cfg = Self {
            dt,
            t_max,
            n_paths,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(Error::Config(format!("dt must lie in (0, {MAX_DT}], got {}", self.dt)));
        }
        if !(self.t_max >= 1.0) || !self.t_max.is_finite() {
            return Err(Error::Config(format!("t_max must be ≥ 1, got {}", self.t_max)));
        }
        if self.n_paths == 0 {
            return Err(Error::Config("need at least one path".into()));
        }
        Ok(())
    }

    /// Number of Euler steps up to `t_max`.
    pub fn steps(&self) -> usize {
        steps_for(self.t_max, self.dt)
    }
}

pub(crate) fn steps_for(horizon: f64, dt: f64) -> usize {
    (horizon / dt).round().max(1.0) as usize
}

/// Cone and envelope sampled on the grid `t_0 + i·dt`, `i = 0..=steps`.
#[derive(Debug, Clone)]
pub struct Barriers {
    t0: f64,
    dt: f64,
    a: f64,
    f: Vec<f64>,
}

impl Barriers {
    pub fn new<T: Coefficient>(
        p: &WickPolynomial<T>,
        cone: &ConeConfig,
        t0: f64,
        dt: f64,
        steps: usize,
    ) -> Result<Self> {
        Ok(Self {
            t0,
            dt,
            a: cone.a,
            f: envelope_on_grid(p, t0, dt, steps + 1)?,
        })
    }

    /// Barriers with a given envelope table (tests and hand-built setups).
    pub fn from_table(a: f64, t0: f64, dt: f64, f: Vec<f64>) -> Self {
        Self { t0, dt, a, f }
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// `g` at grid index `i`.
    #[inline]
    pub fn g(&self, i: usize) -> f64 {
        self.time(i) + self.a
    }

    /// `f_R` at grid index `i`.
    #[inline]
    pub fn f(&self, i: usize) -> f64 {
        self.f[i]
    }

    pub fn steps(&self) -> usize {
        self.f.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn offset(&self) -> f64 {
        self.a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Between an envelope return and the next cone hit.
    Low,
    /// Between a cone hit and the next envelope return.
    High,
}

/// A stopping time fired while observing one grid value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Crossing {
    /// Cone hit at the given time.
    Cone(f64),
    /// Envelope return at the given time.
    Envelope(f64),
}

/// Alternating stopping-time detector at grid resolution.
#[derive(Debug, Clone)]
pub struct StoppingTracker {
    regime: Regime,
}

impl StoppingTracker {
    /// `Low` looks for a cone hit first; `High` looks for an envelope return first.
    pub fn new(initial: Regime) -> Self {
        Self { regime: initial }
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    #[inline]
    pub fn observe(&mut self, i: usize, v: f64, b: &Barriers) -> Option<Crossing> {
        match self.regime {
            Regime::Low if v.abs() >= b.g(i) => {
                self.regime = Regime::High;
                Some(Crossing::Cone(b.time(i)))
            }
            Regime::High if v.abs() <= b.f(i) => {
                self.regime = Regime::Low;
                Some(Crossing::Envelope(b.time(i)))
            }
            _ => None,
        }
    }
}

/// One discretised path with its stopping times and per-step regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `H_1, H_2, …`
    pub h_list: Vec<f64>,
    /// `L_1, L_2, …` (`L_0 = 0` is implicit).
    pub l_list: Vec<f64>,
    /// One label per step; `labels[i]` covers `[times[i], times[i+1]]`.
    pub labels: Vec<Regime>,
}

impl PathRecord {
    /// Classifies given grid values (one per barrier grid point).
    pub fn from_values(values: Vec<f64>, b: &Barriers) -> Result<Self> {
        if values.len() != b.steps() + 1 {
            return Err(Error::Config(format!(
                "expected {} values, got {}",
                b.steps() + 1,
                values.len()
            )));
        }
        let mut tracker = StoppingTracker::new(Regime::Low);
        let mut rec = PathRecord {
            times: (0..values.len()).map(|i| b.time(i)).collect(),
            values: Vec::new(),
            h_list: Vec::new(),
            l_list: Vec::new(),
            labels: Vec::with_capacity(values.len() - 1),
        };
        for (i, &v) in values.iter().enumerate() {
            match tracker.observe(i, v, b) {
                Some(Crossing::Cone(t)) => rec.h_list.push(t),
                Some(Crossing::Envelope(t)) => rec.l_list.push(t),
                None => {}
            }
            if i + 1 < values.len() {
                rec.labels.push(tracker.regime());
            }
        }
        rec.values = values;
        Ok(rec)
    }
}

fn brownian_values(cfg: &SimConfig, start: f64, index: u64) -> Vec<f64> {
    let mut rng = stream(cfg.seed, index);
    let sd = cfg.dt.sqrt();
    let mut v = start;
    let mut out = Vec::with_capacity(cfg.steps() + 1);
    out.push(v);
    for _ in 0..cfg.steps() {
        v += sd * rng.sample::<f64, _>(StandardNormal);
        out.push(v);
    }
    out
}

/// Simulates path number `index` of `cfg` from `B_0 = 0` and classifies it.
pub fn simulate_path<T: Coefficient>(
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    index: u64,
) -> Result<PathRecord> {
    cfg.validate()?;
    let b = Barriers::new(p, cone, 0.0, cfg.dt, cfg.steps())?;
    PathRecord::from_values(brownian_values(cfg, 0.0, index), &b)
}

/// Per-path functionals of the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathFunctionals {
    /// `P_R(B_T; T)` at the horizon.
    pub d_t: f64,
    /// Stochastic integral over LOW steps.
    pub d_l: f64,
    /// Stochastic integral over HIGH steps.
    pub d_h: f64,
    /// `d_t − P_R(B_0;0) − Σ_i P'_R(B_{t_i}; t_i)·ΔB_i` over all steps.
    pub first_order_residual: f64,
    /// `Σ_k P_R(g(H_k); H_k)`.
    pub q: f64,
    /// `P_R(B_0; 0)`.
    pub r0: f64,
    pub hits: u32,
    /// Smallest `P_R(B_t; t)` at the start of a HIGH step (`+∞` if none).
    pub min_high: f64,
    /// Largest `|P_R(B_{L_k}; L_k)|` over envelope returns (0 if none).
    pub max_return_value: f64,
    pub ends_high: bool,
}

impl PathFunctionals {
    /// `d_t ≥ P_R(B_0;0) + d_L − q − tol`.
    pub fn inequality_holds(&self, tol: f64) -> bool {
        self.d_t >= self.r0 + self.d_l - self.q - tol
    }

    /// `d_t − (P_R(B_0;0) + d_L + d_H)`, zero up to rounding.
    pub fn closure_error(&self) -> f64 {
        self.d_t - (self.r0 + self.d_l + self.d_h)
    }
}

/// Functionals from a classified record, using its labels and stopping times.
pub fn decompose<T: Coefficient>(
    path: &PathRecord,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
) -> PathFunctionals {
    let (mut d_l, mut d_h, mut first_order, mut min_high) = (0.0, 0.0, 0.0, f64::INFINITY);
    for (i, label) in path.labels.iter().enumerate() {
        let (t, v) = (path.times[i], path.values[i]);
        let now = p.eval(v, t);
        let incr = p.eval(path.values[i + 1], path.times[i + 1]) - now;
        first_order += p.eval_dx(v, t) * (path.values[i + 1] - v);
        match label {
            Regime::Low => d_l += incr,
            Regime::High => {
                d_h += incr;
                min_high = min_high.min(now);
            }
        }
    }
    let value_at = |s: f64| {
        let i = path.times.partition_point(|&x| x < s - 1e-9);
        path.values[i]
    };
    let last = path.values.len() - 1;
    let d_t = p.eval(path.values[last], path.times[last]);
    let r0 = p.eval(path.values[0], path.times[0]);
    PathFunctionals {
        d_t,
        d_l,
        d_h,
        first_order_residual: d_t - r0 - first_order,
        q: path.h_list.iter().map(|&h| p.eval(cone.g(h), h)).sum(),
        r0,
        hits: path.h_list.len() as u32,
        min_high,
        max_return_value: path
            .l_list
            .iter()
            .map(|&l| p.eval(value_at(l), l).abs())
            .fold(0.0, f64::max),
        ends_high: path.h_list.len() > path.l_list.len(),
    }
}

/// Streams one Brownian path through the tracker without storing it.
fn stream_functionals<T: Coefficient, R: Rng>(
    rng: &mut R,
    p: &WickPolynomial<T>,
    b: &Barriers,
) -> PathFunctionals {
    let sd = b.dt().sqrt();
    let mut tracker = StoppingTracker::new(Regime::Low);
    let mut out = PathFunctionals {
        d_t: 0.0,
        d_l: 0.0,
        d_h: 0.0,
        first_order_residual: 0.0,
        q: 0.0,
        r0: p.eval(0.0, b.time(0)),
        hits: 0,
        min_high: f64::INFINITY,
        max_return_value: 0.0,
        ends_high: false,
    };
    let mut v = 0.0f64;
    let mut now = out.r0;
    let mut first_order = 0.0;
    for i in 0..=b.steps() {
        let t = b.time(i);
        match tracker.observe(i, v, b) {
            Some(Crossing::Cone(h)) => {
                out.q += p.eval(b.g(i), h);
                out.hits += 1;
            }
            Some(Crossing::Envelope(l)) => {
                out.max_return_value = out.max_return_value.max(p.eval(v, l).abs());
            }
            None => {}
        }
        if i == b.steps() {
            out.d_t = now;
            break;
        }
        let step = sd * rng.sample::<f64, _>(StandardNormal);
        first_order += p.eval_dx(v, t) * step;
        let next = p.eval(v + step, b.time(i + 1));
        match tracker.regime() {
            Regime::Low => out.d_l += next - now,
            Regime::High => {
                out.d_h += next - now;
                out.min_high = out.min_high.min(now);
            }
        }
        v += step;
        now = next;
    }
    out.first_order_residual = out.d_t - out.r0 - first_order;
    out.ends_high = tracker.regime() == Regime::High;
    out
}

/// Functionals for every path of `cfg`, in path order.
pub fn simulate_functionals<T: Coefficient>(
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
) -> Result<Vec<PathFunctionals>> {
    cfg.validate()?;
    let b = Barriers::new(p, cone, 0.0, cfg.dt, cfg.steps())?;
    Ok(par_map(cfg.n_paths, |i| {
        stream_functionals(&mut stream(cfg.seed, i), p, &b)
    }))
}

/// Discretisation slack `√dt · (1 + t_max^n)`.
pub fn tolerance(dt: f64, t_max: f64, half_degree: usize) -> f64 {
    dt.sqrt() * (1.0 + t_max.powi(half_degree as i32))
}

/// Aggregate view of a batch of path functionals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionSummary {
    pub n_paths: u64,
    pub tol: f64,
    /// Fraction of paths with `d_t ≥ P_R(B_0;0) + d_L − q − tol`.
    pub inequality_fraction: f64,
    /// Paths with `d_H > tol`.
    pub high_violations: u64,
    pub max_d_h: f64,
    /// Paths with a HIGH step where `P_R < −tol`.
    pub positivity_violations: u64,
    pub paths_ending_high: u64,
    pub max_closure_error: f64,
    /// Root mean square of the first-order Itô residual.
    pub first_order_rms: f64,
    pub q: McEstimate,
}

pub fn summarize(f: &[PathFunctionals], tol: f64, seed: u64) -> DecompositionSummary {
    let n = f.len() as u64;
    let q: Moments = f.iter().map(|x| x.q).collect();
    DecompositionSummary {
        n_paths: n,
        tol,
        inequality_fraction: f.iter().filter(|x| x.inequality_holds(tol)).count() as f64
            / n.max(1) as f64,
        high_violations: f.iter().filter(|x| x.d_h > tol).count() as u64,
        max_d_h: f.iter().map(|x| x.d_h).fold(f64::NEG_INFINITY, f64::max),
        positivity_violations: f.iter().filter(|x| x.min_high < -tol).count() as u64,
        paths_ending_high: f.iter().filter(|x| x.ends_high).count() as u64,
        max_closure_error: f.iter().map(|x| x.closure_error().abs()).fold(0.0, f64::max),
        first_order_rms: (f.iter().map(|x| x.first_order_residual.powi(2)).sum::<f64>()
            / n.max(1) as f64)
            .sqrt(),
        q: q.estimate(seed),
    }
}

/// `8/√(2πm) · e^{−m/2}`.
pub fn hitting_bound(m: f64) -> f64 {
    8.0 / (2.0 * std::f64::consts::PI * m).sqrt() * (-m / 2.0).exp()
}

/// `4/√(2πm) · e^{−m/2}`.
pub fn sup_tail_bound(m: f64) -> f64 {
    0.5 * hitting_bound(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HitRow {
    pub m: u32,
    pub mean: f64,
    pub stderr: f64,
    pub bound: f64,
}

/// Pooled over windows `(m−1, m]`: how often a window with at least `k` cone
/// hits has at least `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HalvingRow {
    pub k: u32,
    pub at_least_k: u64,
    pub at_least_k_plus_1: u64,
    /// `None` when no window reached `k` hits.
    pub ratio: Option<f64>,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HittingStats {
    pub n_paths: u64,
    pub seed: u64,
    pub rows: Vec<HitRow>,
    pub halving: Vec<HalvingRow>,
}

/// Mean number of cone hits in each window `(m−1, m]`, `m = 1..=m_max`.
pub fn hitting_counts<T: Coefficient>(
    cfg: &SimConfig,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    m_max: u32,
) -> Result<HittingStats> {
    cfg.validate()?;
    if m_max == 0 || m_max as f64 > cfg.t_max {
        return Err(Error::Config(format!(
            "m_max must lie in [1, t_max = {}], got {m_max}",
            cfg.t_max
        )));
    }
    let steps = steps_for(m_max as f64, cfg.dt);
    let b = Barriers::new(p, cone, 0.0, cfg.dt, steps)?;
    let windows = m_max as usize;
    let counts: Vec<Vec<u32>> = par_map(cfg.n_paths, |idx| {
        let mut rng = stream(cfg.seed, idx);
        let sd = cfg.dt.sqrt();
        let mut tracker = StoppingTracker::new(Regime::Low);
        let mut c = vec![0u32; windows];
        let mut v = 0.0f64;
        for i in 0..=steps {
            if let Some(Crossing::Cone(h)) = tracker.observe(i, v, &b) {
                let w = (h - 1e-9).ceil().max(1.0) as usize;
                if w <= windows {
                    c[w - 1] += 1;
                }
            }
            v += sd * rng.sample::<f64, _>(StandardNormal);
        }
        c
    });
    let rows = (0..windows)
        .map(|w| {
            let m: Moments = counts.iter().map(|c| c[w] as f64).collect();
            HitRow {
                m: w as u32 + 1,
                mean: m.mean(),
                stderr: m.stderr(),
                bound: hitting_bound(w as f64 + 1.0),
            }
        })
        .collect();
    let halving = [1u32, 2]
        .iter()
        .map(|&k| {
            let den = counts.iter().flatten().filter(|&&c| c >= k).count() as u64;
            let num = counts.iter().flatten().filter(|&&c| c > k).count() as u64;
            let ratio = (den > 0).then(|| num as f64 / den as f64);
            let stderr = ratio.map_or(0.0, |r| (r * (1.0 - r) / den as f64).sqrt());
            HalvingRow {
                k,
                at_least_k: den,
                at_least_k_plus_1: num,
                ratio,
                stderr,
            }
        })
        .collect();
    Ok(HittingStats {
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        rows,
        halving,
    })
}

/// Probability that a Brownian bridge over one step of length `dt` between
/// `x0` and `x1` (both below `level`) touches `level`.
#[inline]
pub(crate) fn bridge_cross(level_gap0: f64, level_gap1: f64, variance: f64) -> f64 {
    (-2.0 * level_gap0 * level_gap1 / variance).exp()
}

/// Monte Carlo `P[sup_{s≤m} |B_s| ≥ m]`.
///
/// Each path contributes its conditional crossing probability given the grid
/// values (Brownian-bridge correction), which removes the discrete-monitoring bias.
pub fn sup_tail(cfg: &SimConfig, m: f64) -> Result<McEstimate> {
    cfg.validate()?;
    if !(m > 0.0 && m <= cfg.t_max) {
        return Err(Error::Config(format!("m must lie in (0, t_max], got {m}")));
    }
    let steps = steps_for(m, cfg.dt);
    let est: Moments = par_map(cfg.n_paths, |idx| {
        let mut rng = stream(cfg.seed, idx);
        let sd = cfg.dt.sqrt();
        let mut survive = 1.0f64;
        let mut v = 0.0f64;
        for _ in 0..steps {
            let w = v + sd * rng.sample::<f64, _>(StandardNormal);
            if w.abs() >= m {
                return 1.0;
            }
            survive *= (1.0 - bridge_cross(m - v, m - w, cfg.dt))
                * (1.0 - bridge_cross(m + v, m + w, cfg.dt));
            v = w;
        }
        1.0 - survive
    })
    .into_iter()
    .collect();
    Ok(est.estimate(cfg.seed))
}
