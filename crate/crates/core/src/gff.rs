//! A Gaussian scale decomposition of a log-correlated covariance and the
//! cut-off field it generates.
//!
//! The kernel family is `Q_u(r) = exp(−e^{2u} r²/2)`, so `Q_u(x, x) = 1` and
//! `K_t(x, x) = t` exactly, while `K_∞(r) = ½E₁(r²/2) = ln(1/r) + O(1)`.
//! Because `Q_u` factorises over coordinates, the Gram matrix on a tensor grid is
//! a Kronecker product of two one-dimensional Gram matrices and the field is
//! sampled as `X += √du · L_y Z L_xᵀ`.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envelope::ConeConfig;
use crate::paths::{steps_for, Barriers, Crossing, Regime, StoppingTracker};
use crate::quad::integrate;
use crate::rng::stream;
use crate::stats::par_map;
use crate::wickpoly::WickPolynomial;
use crate::{Coefficient, Error, Result};

/// Largest grid side accepted by the sampler.
pub const MAX_GRID: usize = 64;
/// Diagonal shift applied once when a Cholesky factorisation fails.
pub const JITTER: f64 = 1e-10;

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelDecomposition {
    /// Scale step of the sampler.
    pub du: f64,
    /// Truncation scale for scale integrals.
    pub u_max: f64,
}

impl Default for KernelDecomposition {
    fn default() -> Self {
        Self { du: 1e-2, u_max: 20.0 }
    }
}

impl KernelDecomposition {
    pub fn new(du: f64, u_max: f64) -> Result<Self> {
        if !(du > 0.0 && du <= 0.1) {
            return Err(Error::Config(format!("scale step must lie in (0, 0.1], got {du}")));
        }
        if !(u_max > 0.0 && u_max.is_finite()) {
            return Err(Error::Config(format!("u_max must be positive, got {u_max}")));
        }
        Ok(Self { du, u_max })
    }

    /// `Q_u(r)`.
    #[inline]
    pub fn q(&self, u: f64, r: f64) -> f64 {
        (-(2.0 * u).exp() * r * r / 2.0).exp()
    }
}

/// `K_t(r) = ∫_0^t Q_u(r) du` to absolute error `1e−10`.
pub fn k_cumulative(kd: &KernelDecomposition, t: f64, r: f64) -> Result<f64> {
    if !(t >= 0.0) || !(r >= 0.0) {
        return Err(Error::Domain(format!("need t ≥ 0 and r ≥ 0, got t={t}, r={r}")));
    }
    if r == 0.0 || t == 0.0 {
        return Ok(t);
    }
    // beyond this scale the integrand is below e^{−40}
    let cutoff = 0.5 * (80.0 / (r * r)).ln();
    let upper = t.min(cutoff.max(0.0));
    if upper <= 0.0 {
        return Ok(0.0);
    }
    Ok(integrate(|u| kd.q(u, r), 0.0, upper, 1e-11)?.value)
}

/// `max(0, ln(1/r))`.
pub fn ln_plus_inv(r: f64) -> f64 {
    (-r.ln()).max(0.0)
}

/// An axis-aligned rectangle with an `m × m` grid of cell centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub m: usize,
}

impl GridDomain {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, m: usize) -> Result<Self> {
        if !(x1 > x0 && y1 > y0) || m == 0 {
            return Err(Error::Config(format!(
                "need a non-empty rectangle and m ≥ 1, got [{x0}, {x1}]×[{y0}, {y1}], m={m}"
            )));
        }
        Ok(Self { x0, y0, x1, y1, m })
    }

    pub fn unit_square(m: usize) -> Result<Self> {
        Self::new(0.0, 0.0, 1.0, 1.0, m)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// `Δa`, so that `Δa·m² = area`.
    pub fn cell_area(&self) -> f64 {
        self.area() / (self.m * self.m) as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        centres(self.x0, self.x1, self.m)
    }

    pub fn ys(&self) -> Vec<f64> {
        centres(self.y0, self.y1, self.m)
    }

    /// Points in storage order: index `i·m + j` is `(xs[j], ys[i])`.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let (xs, ys) = (self.xs(), self.ys());
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect()
    }
}

fn centres(a: f64, b: f64, m: usize) -> Vec<f64> {
    let h = (b - a) / m as f64;
    (0..m).map(|k| a + (k as f64 + 0.5) * h).collect()
}

/// One-dimensional Gram matrix `[Q_u(c_i − c_j)]`.
pub fn gram_1d(kd: &KernelDecomposition, coords: &[f64], u: f64) -> DMatrix<f64> {
    DMatrix::from_fn(coords.len(), coords.len(), |i, j| kd.q(u, coords[i] - coords[j]))
}

fn eig_range(g: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(g.clone()).eigenvalues;
    (e.min(), e.max())
}

/// Smallest eigenvalue of the grid Gram matrix at scale `u` (products of the
/// one-dimensional spectra).
pub fn gram_min_eigenvalue(kd: &KernelDecomposition, domain: &GridDomain, u: f64) -> f64 {
    let (ax, bx) = eig_range(&gram_1d(kd, &domain.xs(), u));
    let (ay, by) = eig_range(&gram_1d(kd, &domain.ys(), u));
    [ax * ay, ax * by, bx * ay, bx * by]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

fn factor(g: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = g.clone().cholesky() {
        return Ok(c.l());
    }
    let n = g.nrows();
    (g + DMatrix::identity(n, n) * JITTER)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical("Gram factorisation failed after diagonal jitter".into()))
}

#[derive(Debug, Clone)]
struct ScaleStep {
    /// `None` when the Gram matrix is exactly the identity.
    lx: Option<DMatrix<f64>>,
    ly: Option<DMatrix<f64>>,
}

fn factor_axis(kd: &KernelDecomposition, coords: &[f64], u: f64) -> Result<Option<DMatrix<f64>>> {
    let g = gram_1d(kd, coords, u);
    let identity = (0..g.nrows()).all(|i| (0..g.ncols()).all(|j| i == j || g[(i, j)] == 0.0));
    if identity {
        Ok(None)
    } else {
        factor(g).map(Some)
    }
}

/// Cached per-scale factors for a grid, shared read-only by all replicas.
#[derive(Debug, Clone)]
pub struct FieldSampler {
    kd: KernelDecomposition,
    domain: GridDomain,
    steps: Vec<ScaleStep>,
}

impl FieldSampler {
    /// Factors every scale step `[k·du, (k+1)·du]` up to `t_max` (midpoint rule).
    pub fn new(kd: &KernelDecomposition, domain: &GridDomain, t_max: f64) -> Result<Self> {
        if domain.m > MAX_GRID {
            return Err(Error::Config(format!("grid side {} exceeds {MAX_GRID}", domain.m)));
        }
        let n = if t_max > 0.0 { steps_for(t_max, kd.du) } else { 0 };
        let (xs, ys) = (domain.xs(), domain.ys());
        let steps = (0..n)
            .map(|k| {
                let u = (k as f64 + 0.5) * kd.du;
                Ok(ScaleStep {
                    lx: factor_axis(kd, &xs, u)?,
                    ly: factor_axis(kd, &ys, u)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kd: *kd,
            domain: *domain,
            steps,
        })
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    pub fn du(&self) -> f64 {
        self.kd.du
    }

    pub fn max_steps(&self) -> usize {
        self.steps.len()
    }

    /// Adds the increment of scale step `k` to `values`.
    pub fn step<R: Rng>(&self, k: usize, rng: &mut R, values: &mut [f64]) {
        let m = self.domain.m;
        let z = DMatrix::<f64>::from_fn(m, m, |_, _| rng.sample(StandardNormal));
        let st = &self.steps[k];
        let mut inc = match &st.ly {
            Some(ly) => ly * z,
            None => z,
        };
        if let Some(lx) = &st.lx {
            inc = inc * lx.transpose();
        }
        let s = self.kd.du.sqrt();
        for i in 0..m {
            for j in 0..m {
                values[i * m + j] += s * inc[(i, j)];
            }
        }
    }

    /// Field at scale-time `t` (rounded to the scale grid).
    pub fn sample<R: Rng>(&self, rng: &mut R, t: f64) -> Result<Vec<f64>> {
        let n = self.steps_to(t)?;
        let mut v = vec![0.0; self.domain.m * self.domain.m];
        for k in 0..n {
            self.step(k, rng, &mut v);
        }
        Ok(v)
    }

    fn steps_to(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("scale-time must be ≥ 0, got {t}")));
        }
        let n = if t == 0.0 { 0 } else { steps_for(t, self.kd.du) };
        if n > self.steps.len() {
            return Err(Error::Config(format!(
                "sampler prepared up to {} scale steps, {t} needs {n}",
                self.steps.len()
            )));
        }
        Ok(n)
    }
}

/// A sampled field at one scale-time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub t: f64,
    pub domain: GridDomain,
    pub seed: u64,
    pub replica: u64,
    /// Row-major, `values[i·m + j]` at `(xs[j], ys[i])`.
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    t: f64,
    domain: GridDomain,
    seed: u64,
    replica: u64,
    dtype: String,
    layout: String,
    len: usize,
}

impl FieldSnapshot {
    /// Writes `path` (little-endian `f64`, row-major) and a JSON header next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes)?;
        let header = SnapshotHeader {
            t: self.t,
            domain: self.domain,
            seed: self.seed,
            replica: self.replica,
            dtype: "f64le".into(),
            layout: "row-major".into(),
            len: self.values.len(),
        };
        std::fs::write(header_path(path), serde_json::to_string_pretty(&header)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: SnapshotHeader = serde_json::from_str(&std::fs::read_to_string(header_path(path))?)?;
        let bytes = std::fs::read(path)?;
        if bytes.len() != 8 * header.len {
            return Err(Error::Config(format!(
                "{} holds {} bytes, header expects {}",
                path.display(),
                bytes.len(),
                8 * header.len
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            t: header.t,
            domain: header.domain,
            seed: header.seed,
            replica: header.replica,
            values,
        })
    }
}

/// `<file>.json` next to a binary dump.
pub fn header_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

/// Replica `replica` of the field at scale-time `t`.
pub fn sample_field(sampler: &FieldSampler, t: f64, seed: u64, replica: u64) -> Result<FieldSnapshot> {
    let values = sampler.sample(&mut stream(seed, replica), t)?;
    Ok(FieldSnapshot {
        t,
        domain: *sampler.domain(),
        seed,
        replica,
        values,
    })
}

/// `D_t = Σ_i P_R(X_t(x_i); t)·Δa`.
pub fn field_functional<T: Coefficient>(snapshot: &FieldSnapshot, p: &WickPolynomial<T>) -> f64 {
    let da = snapshot.domain.cell_area();
    snapshot.values.iter().map(|&x| p.eval(x, snapshot.t)).sum::<f64>() * da
}

/// Per-replica functionals of a field run with site-wise stopping times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldRun {
    pub d_t: f64,
    pub d_l: f64,
    pub d_h: f64,
    /// `Σ_x Δa Σ_k P_R(g(H^x_k); H^x_k)`.
    pub q: f64,
    /// `Σ_k (ΔD_L)²` over scale steps.
    pub realized_qv: f64,
}

/// Barriers on the sampler's scale grid up to `t`.
pub fn field_barriers<T: Coefficient>(
    sampler: &FieldSampler,
    p: &WickPolynomial<T>,
    cone: &ConeConfig,
    t: f64,
) -> Result<Barriers> {
    let n = sampler.steps_to(t)?;
    Barriers::new(p, cone, 0.0, sampler.du(), n)
}

/// Runs one replica to scale-time `b.steps()·du`, splitting each site's
/// martingale increments by its own LOW/HIGH regime.
pub fn field_run<T: Coefficient>(
    sampler: &FieldSampler,
    p: &WickPolynomial<T>,
    b: &Barriers,
    seed: u64,
    replica: u64,
) -> FieldRun {
    let mut rng = stream(seed, replica);
    let sites = sampler.domain().m * sampler.domain().m;
    let da = sampler.domain().cell_area();
    let mut x = vec![0.0; sites];
    let mut now: Vec<f64> = vec![p.eval(0.0, 0.0); sites];
    let mut trackers = vec![StoppingTracker::new(Regime::Low); sites];
    let mut regimes = vec![Regime::Low; sites];
    let mut out = FieldRun {
        d_t: 0.0,
        d_l: 0.0,
        d_h: 0.0,
        q: 0.0,
        realized_qv: 0.0,
    };
    let n = b.steps();
    for k in 0..=n {
        for s in 0..sites {
            if let Some(Crossing::Cone(h)) = trackers[s].observe(k, x[s], b) {
                out.q += da * p.eval(b.g(k), h);
            }
            regimes[s] = trackers[s].regime();
        }
        if k == n {
            break;
        }
        sampler.step(k, &mut rng, &mut x);
        let t1 = b.time(k + 1);
        let mut dl = 0.0;
        for s in 0..sites {
            let next = p.eval(x[s], t1);
            let inc = da * (next - now[s]);
            match regimes[s] {
                Regime::Low => dl += inc,
                Regime::High => out.d_h += inc,
            }
            now[s] = next;
        }
        out.d_l += dl;
        out.realized_qv += dl * dl;
    }
    out.d_t = now.iter().sum::<f64>() * da;
    out
}

/// `field_run` over `n` replicas, in replica order.
pub fn field_runs<T: Coefficient>(
    sampler: &FieldSampler,
    p: &WickPolynomial<T>,
    b: &Barriers,
    n: u64,
    seed: u64,
) -> Vec<FieldRun> {
    par_map(n, |i| field_run(sampler, p, b, seed, i))
}

/// `D_t` at each (ascending) `t` in `t_list` for `n` replicas; `out[k][i]` is
/// replica `i` at `t_list[k]`, all times read off one field history.
pub fn functional_samples<T: Coefficient>(
    sampler: &FieldSampler,
    p: &WickPolynomial<T>,
    t_list: &[f64],
    n: u64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if t_list.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("scale-times must be ascending".into()));
    }
    let marks = t_list.iter().map(|&t| sampler.steps_to(t)).collect::<Result<Vec<_>>>()?;
    let da = sampler.domain().cell_area();
    let per_replica = par_map(n, |i| {
        let mut rng = stream(seed, i);
        let mut x = vec![0.0; sampler.domain().m * sampler.domain().m];
        let mut k = 0;
        marks
            .iter()
            .zip(t_list)
            .map(|(&mark, &t)| {
                while k < mark {
                    sampler.step(k, &mut rng, &mut x);
                    k += 1;
                }
                x.iter().map(|&v| p.eval(v, t)).sum::<f64>() * da
            })
            .collect::<Vec<_>>()
    });
    Ok((0..t_list.len())
        .map(|k| per_replica.iter().map(|r| r[k]).collect())
        .collect())
}

/// `∫∫_{[0,a]²} exp(−(x−y)²/(2σ²)) dx dy`.
pub fn pair_integral_1d(a: f64, sigma: f64) -> f64 {
    let z = a / sigma;
    2.0 * (a * sigma * SQRT_2PI * 0.5 * statrs::function::erf::erf(z / std::f64::consts::SQRT_2)
        - sigma * sigma * (-(-z * z / 2.0).exp_m1()))
}

/// How pairs of points in `Λ` are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRule {
    /// Exact continuum integral `∫∫_{Λ²} Q_u(x, y) dx dy`.
    Continuum,
    /// Midpoint sum over grid pairs, diagonal included.
    GridPairs,
}

/// `∫∫ Q_u(x, y)` over `Λ²` under the chosen rule.
pub fn spatial_integral(kd: &KernelDecomposition, domain: &GridDomain, u: f64, rule: SpatialRule) -> f64 {
    match rule {
        SpatialRule::Continuum => {
            let sigma = (-u).exp();
            pair_integral_1d(domain.width(), sigma) * pair_integral_1d(domain.height(), sigma)
        }
        SpatialRule::GridPairs => {
            let sum = |c: &[f64]| gram_1d(kd, c, u).sum();
            let h = domain.cell_area();
            h * h * sum(&domain.xs()) * sum(&domain.ys())
        }
    }
}

/// Tail `∫_U^∞ e^{βu} I(u) du` from the large-`u` form
/// `I(u) = 2πab e^{−2u} − 2√(2π)(a+b) e^{−3u} + 4e^{−4u}` (exact up to `e^{−e^{2u}}` terms).
fn beta_tail(beta: f64, a: f64, b: f64, u: f64) -> f64 {
    2.0 * std::f64::consts::PI * a * b * ((beta - 2.0) * u).exp() / (2.0 - beta)
        - 2.0 * SQRT_2PI * (a + b) * ((beta - 3.0) * u).exp() / (3.0 - beta)
        + 4.0 * ((beta - 4.0) * u).exp() / (4.0 - beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaIntegral {
    pub beta: f64,
    pub u_max: f64,
    /// `∫_0^{u_max} e^{βu} ∫∫ Q_u`.
    pub truncated: f64,
    /// Analytic remainder beyond `u_max`.
    pub tail: f64,
    pub total: f64,
}

fn truncated_beta(beta: f64, domain: &GridDomain, u_max: f64) -> Result<f64> {
    let kd = KernelDecomposition::default();
    let f = |u: f64| (beta * u).exp() * spatial_integral(&kd, domain, u, SpatialRule::Continuum);
    let scale = f(0.0).abs().max(f(u_max).abs()).max(1.0);
    Ok(integrate(f, 0.0, u_max, 1e-12 * scale * u_max)?.value)
}

/// `∫_0^∞ e^{βu} ∫∫_{Λ²} Q_u(x, y) dx dy du`, truncated at `kd.u_max` plus the analytic tail.
pub fn beta_integrability(kd: &KernelDecomposition, beta: f64, domain: &GridDomain) -> Result<BetaIntegral> {
    if !(beta > 0.0 && beta < 2.0) {
        return Err(Error::Domain(format!(
            "β must lie in (0, 2); the scale integral diverges at β = {beta}"
        )));
    }
    let truncated = truncated_beta(beta, domain, kd.u_max)?;
    let tail = beta_tail(beta, domain.width(), domain.height(), kd.u_max);
    Ok(BetaIntegral {
        beta,
        u_max: kd.u_max,
        truncated,
        tail,
        total: truncated + tail,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceTrend {
    pub beta: f64,
    pub u_max: Vec<f64>,
    pub truncated: Vec<f64>,
    /// Successive increments do not shrink (ratio ≥ 0.99 for equal spacing).
    pub diverging: bool,
}

/// Truncated scale integrals at increasing, equally spaced `u_max`, without a tail.
pub fn beta_divergence_trend(beta: f64, domain: &GridDomain, u_max: &[f64]) -> Result<DivergenceTrend> {
    if u_max.len() < 3 {
        return Err(Error::Config("need at least three truncation points".into()));
    }
    let truncated = u_max
        .iter()
        .map(|&u| truncated_beta(beta, domain, u))
        .collect::<Result<Vec<_>>>()?;
    let inc: Vec<f64> = truncated.windows(2).map(|w| w[1] - w[0]).collect();
    let diverging = inc.windows(2).all(|w| w[1] >= 0.99 * w[0]);
    Ok(DivergenceTrend {
        beta,
        u_max: u_max.to_vec(),
        truncated,
        diverging,
    })
}

/// Sup-distance between `K_t(r)` and `min(t, ln₊(1/r))` over a `(t, r)` grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub t_max: f64,
    pub c_meas: f64,
    /// `(t, r)` where the sup is attained.
    pub argmax: (f64, f64),
    /// `max |K_∞(r) − ln(1/r)|` over `r ∈ [e^{−t_max}, 0.5]`.
    pub log_window: f64,
    /// Smallest Gram eigenvalue over the sampler's scale steps.
    pub gram_min_eigenvalue: f64,
    pub beta: Vec<BetaIntegral>,
    /// Relative change of the β total between `u_max = 20` and `25`.
    pub beta_u_max_change: Vec<f64>,
    pub divergence: DivergenceTrend,
}

pub fn kernel_report(kd: &KernelDecomposition, domain: &GridDomain, t_max: f64) -> Result<KernelReport> {
    let ts: Vec<f64> = (1..=((2.0 * t_max).ceil() as usize)).map(|k| 0.5 * k as f64).collect();
    let rs: Vec<f64> = (0..=80).map(|k| 10f64.powf(-8.0 + 0.1 * k as f64)).collect();
    let (mut c_meas, mut argmax) = (0.0f64, (0.0, 0.0));
    for &t in &ts {
        for &r in &rs {
            let d = (k_cumulative(kd, t, r)? - t.min(ln_plus_inv(r))).abs();
            if d > c_meas {
                c_meas = d;
                argmax = (t, r);
            }
        }
    }
    let mut log_window = 0.0f64;
    for &r in rs.iter().filter(|&&r| r >= (-t_max).exp() && r <= 0.5) {
        log_window = log_window.max((k_cumulative(kd, 1e3, r)? - (1.0 / r).ln()).abs());
    }
    let n = steps_for(t_max, kd.du);
    let gram_min_eigenvalue = (0..n)
        .map(|k| gram_min_eigenvalue(kd, domain, (k as f64 + 0.5) * kd.du))
        .fold(f64::INFINITY, f64::min);
    let betas = [0.5, 1.0, 1.99];
    let beta = betas
        .iter()
        .map(|&b| beta_integrability(kd, b, domain))
        .collect::<Result<Vec<_>>>()?;
    let beta_u_max_change = betas
        .iter()
        .map(|&b| {
            let lo = beta_integrability(&KernelDecomposition { u_max: 20.0, ..*kd }, b, domain)?.total;
            let hi = beta_integrability(&KernelDecomposition { u_max: 25.0, ..*kd }, b, domain)?.total;
            Ok(((hi - lo) / lo).abs())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelReport {
        t_max,
        c_meas,
        argmax,
        log_window,
        gram_min_eigenvalue,
        beta,
        beta_u_max_change,
        divergence: beta_divergence_trend(2.0, domain, &[10.0, 20.0, 30.0, 40.0])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::calibrate_cone;
    use crate::stats::Moments;
    use crate::wickpoly::{wick_order, Polynomial};
    use crate::Rational;
    use proptest::prelude::*;

    /// `E₁(x)` by its power series for `x ≤ 1` and a continued fraction above.
    fn e1(x: f64) -> f64 {
        const EULER: f64 = 0.577_215_664_901_532_9;
        if x <= 1.0 {
            let mut sum = 0.0;
            let mut term = 1.0;
            for k in 1..200 {
                term *= -x / k as f64;
                sum -= term / k as f64;
                if term.abs() < 1e-18 {
                    break;
                }
            }
            -EULER - x.ln() + sum
        } else {
            // modified Lentz on e^{-x}/(x+1-1/(x+3-4/(x+5-…)))
            let mut b = x + 1.0;
            let mut c = 1e300;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..500 {
                let a = -((i * i) as f64);
                b += 2.0;
                d = 1.0 / (a * d + b);
                c = b + a / c;
                let del = c * d;
                h *= del;
                if (del - 1.0).abs() < 1e-16 {
                    break;
                }
            }
            h * (-x).exp()
        }
    }

    fn k_closed(t: f64, r: f64) -> f64 {
        0.5 * (e1(r * r / 2.0) - e1(r * r * (2.0 * t).exp() / 2.0))
    }

    #[test]
    fn e1_reference_values() {
        assert!((e1(1.0) - 0.219_383_934_395_520_3).abs() < 1e-14);
        assert!((e1(0.1) - 1.822_923_958_419_390_7).abs() < 1e-13);
        assert!((e1(5.0) - 1.148_295_591_275_325_7e-3).abs() < 1e-16);
    }

    #[test]
    fn kernel_matches_exponential_integral() {
        let kd = KernelDecomposition::default();
        for t in [0.1, 1.0, 3.0, 10.0] {
            for r in [1e-4, 1e-2, 0.1, 0.5, 1.0, 2.0] {
                let k = k_cumulative(&kd, t, r).unwrap();
                assert!((k - k_closed(t, r)).abs() < 1e-10, "t={t} r={r}: {k} vs {}", k_closed(t, r));
            }
        }
    }

    #[test]
    fn kernel_trivial_cases() {
        let kd = KernelDecomposition::default();
        assert_eq!(k_cumulative(&kd, 3.7, 0.0).unwrap(), 3.7);
        assert_eq!(k_cumulative(&kd, 0.0, 0.4).unwrap(), 0.0);
        // r = 1 stays below ∫_0^∞ e^{−e^{2u}/2} du
        let k = k_cumulative(&kd, 50.0, 1.0).unwrap();
        assert!(k < 1.0 && (k - 0.5 * e1(0.5)).abs() < 1e-10);
        assert!(k_cumulative(&kd, -1.0, 0.5).is_err());
    }

    #[test]
    fn kernel_against_riemann_sum() {
        let kd = KernelDecomposition::default();
        let (t, r) = (2.0, 0.3);
        let n = 200_000;
        let h = t / n as f64;
        let riemann: f64 = (0..n).map(|k| kd.q((k as f64 + 0.5) * h, r)).sum::<f64>() * h;
        assert!((k_cumulative(&kd, t, r).unwrap() - riemann).abs() < 1e-9);
    }

    #[test]
    fn log_divergence_constant() {
        // K_∞(r) − ln(1/r) → (ln 2 − γ)/2
        let kd = KernelDecomposition::default();
        let limit = 0.5 * (2f64.ln() - 0.577_215_664_901_532_9);
        let d = k_cumulative(&kd, 60.0, 1e-8).unwrap() - (1e8f64).ln();
        assert!((d - limit).abs() < 1e-8, "{d}");
    }

    #[test]
    fn domain_geometry() {
        let d = GridDomain::new(0.0, 0.0, 2.0, 1.0, 4).unwrap();
        assert!((d.cell_area() * 16.0 - d.area()).abs() < 1e-15);
        assert!(d.points().iter().all(|&(x, y)| x > 0.0 && x < 2.0 && y > 0.0 && y < 1.0));
        assert_eq!(d.points()[1], (0.75, 0.125));
        assert!(GridDomain::new(0.0, 0.0, 0.0, 1.0, 4).is_err());
        assert!(GridDomain::unit_square(0).is_err());
    }

    #[test]
    fn gram_is_psd_at_all_scales() {
        let kd = KernelDecomposition::default();
        let d = GridDomain::unit_square(16).unwrap();
        for k in 0..60 {
            let u = 0.1 * k as f64;
            assert!(gram_min_eigenvalue(&kd, &d, u) >= -1e-10, "u={u}");
        }
    }

    #[test]
    fn kronecker_eigen_matches_full_gram() {
        let kd = KernelDecomposition::default();
        let d = GridDomain::new(0.0, 0.0, 1.0, 0.7, 4).unwrap();
        let u = 0.8;
        let pts = d.points();
        let full = DMatrix::from_fn(16, 16, |i, j| {
            let (a, b) = (pts[i], pts[j]);
            kd.q(u, ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
        });
        let (lo, _) = eig_range(&full);
        assert!((lo - gram_min_eigenvalue(&kd, &d, u)).abs() < 1e-12);
    }

    #[test]
    fn zero_time_and_single_point() {
        let kd = KernelDecomposition::default();
        let d = GridDomain::unit_square(4).unwrap();
        let s = FieldSampler::new(&kd, &d, 1.0).unwrap();
        assert!(sample_field(&s, 0.0, 1, 0).unwrap().values.iter().all(|&v| v == 0.0));
        // one site: a standard Brownian motion in t
        let one = FieldSampler::new(&kd, &GridDomain::unit_square(1).unwrap(), 2.0).unwrap();
        let m: Moments = par_map(20_000, |i| {
            let v = sample_field(&one, 2.0, 3, i).unwrap().values[0];
            v * v
        })
        .into_iter()
        .collect();
        assert!(m.estimate(3).within(2.0, 4.0), "{:?}", m.estimate(3));
    }

    #[test]
    fn two_point_covariance() {
        let kd = KernelDecomposition::default();
        let d = GridDomain::new(0.0, 0.0, 0.6, 0.3, 2).unwrap();
        let t = 1.5;
        let s = FieldSampler::new(&kd, &d, t).unwrap();
        let r = d.points()[0].0 - d.points()[1].0;
        let prods: Moments = par_map(10_000, |i| {
            let v = sample_field(&s, t, 5, i).unwrap().values;
            v[0] * v[1]
        })
        .into_iter()
        .collect();
        let est = prods.estimate(5);
        assert!(est.within(k_cumulative(&kd, t, r.abs()).unwrap(), 3.0), "{est:?}");
    }

    #[test]
    fn snapshot_roundtrip() {
        let kd = KernelDecomposition::default();
        let d = GridDomain::unit_square(3).unwrap();
        let s = FieldSampler::new(&kd, &d, 1.0).unwrap();
        let snap = sample_field(&s, 1.0, 9, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.bin");
        snap.save(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 72);
        let back = FieldSnapshot::load(&path).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.values, snap.values);
    }

    #[test]
    fn functional_examples() {
        let p = wick_order(&Polynomial::<Rational>::parse("0,0,0,0,1").unwrap());
        let d = GridDomain::unit_square(8).unwrap();
        let zero = FieldSnapshot {
            t: 1.0,
            domain: d,
            seed: 0,
            replica: 0,
            values: vec![0.0; 64],
        };
        assert!((field_functional(&zero, &p) - 3.0).abs() < 1e-12);
        let kd = KernelDecomposition::default();
        let s = FieldSampler::new(&kd, &d, 2.0).unwrap();
        let samples: Vec<f64> = par_map(2000, |i| field_functional(&sample_field(&s, 2.0, 4, i).unwrap(), &p));
        assert!(samples.iter().all(|&x| x >= -6.0 * 4.0 * d.area()));
        let m: Moments = samples.into_iter().collect();
        assert!(m.estimate(4).within(0.0, 3.0), "{:?}", m.estimate(4));
    }

    #[test]
    fn field_run_closes() {
        let p = wick_order(&Polynomial::<Rational>::parse("0,0,0,0,1").unwrap());
        let cone = calibrate_cone(&p, 50.0, &[]).unwrap();
        let kd = KernelDecomposition::default();
        let d = GridDomain::unit_square(4).unwrap();
        let s = FieldSampler::new(&kd, &d, 3.0).unwrap();
        let b = field_barriers(&s, &p, &cone, 3.0).unwrap();
        for i in 0..20 {
            let run = field_run(&s, &p, &b, 8, i);
            let snap = sample_field(&s, 3.0, 8, i).unwrap();
            let d_t = field_functional(&snap, &p);
            assert!((run.d_t - d_t).abs() < 1e-9 * (1.0 + d_t.abs()));
            assert!((run.d_t - run.d_l - run.d_h).abs() < 1e-9 * (1.0 + d_t.abs()));
            assert!(run.realized_qv >= 0.0);
        }
    }

    #[test]
    fn functional_samples_follow_one_history() {
        let p = wick_order(&Polynomial::<Rational>::parse("0,0,1,0,1").unwrap());
        let kd = KernelDecomposition::default();
        let d = GridDomain::unit_square(3).unwrap();
        let s = FieldSampler::new(&kd, &d, 2.0).unwrap();
        let out = functional_samples(&s, &p, &[1.0, 2.0], 5, 6).unwrap();
        for i in 0..5 {
            let snap = sample_field(&s, 2.0, 6, i).unwrap();
            assert!((out[1][i as usize] - field_functional(&snap, &p)).abs() < 1e-12);
        }
        assert!(functional_samples(&s, &p, &[2.0, 1.0], 5, 6).is_err());
        assert!(functional_samples(&s, &p, &[3.0], 5, 6).is_err());
    }

    #[test]
    fn pair_integral_matches_quadrature() {
        for (a, sigma) in [(1.0, 1.0), (0.7, 0.05), (2.0, 3.0)] {
            let direct = integrate(
                |x| integrate(|y| (-(x - y) * (x - y) / (2.0 * sigma * sigma)).exp(), 0.0, a, 1e-13).unwrap().value,
                0.0,
                a,
                1e-11,
            )
            .unwrap()
            .value;
            assert!((pair_integral_1d(a, sigma) - direct).abs() < 1e-9, "a={a} σ={sigma}");
        }
    }

    #[test]
    fn beta_integrals() {
        let kd = KernelDecomposition::default();
        let d = GridDomain::unit_square(8).unwrap();
        for beta in [0.5, 1.0, 1.99] {
            let lo = beta_integrability(&kd, beta, &d).unwrap();
            let hi = beta_integrability(&KernelDecomposition { u_max: 25.0, ..kd }, beta, &d).unwrap();
            assert!(lo.total.is_finite() && lo.tail > 0.0);
            assert!(((hi.total - lo.total) / lo.total).abs() < 1e-6, "β={beta}");
        }
        assert!(beta_integrability(&kd, 2.0, &d).is_err());
        assert!(beta_divergence_trend(2.0, &d, &[10.0, 20.0, 30.0]).unwrap().diverging);
        assert!(!beta_divergence_trend(1.0, &d, &[10.0, 20.0, 30.0]).unwrap().diverging);
        assert!(!beta_divergence_trend(1.99, &d, &[10.0, 20.0, 30.0]).unwrap().diverging);
    }

    proptest! {
        #[test]
        fn kernel_between_bounds(t in 0.0f64..15.0, r in 1e-6f64..3.0) {
            let kd = KernelDecomposition::default();
            let k = k_cumulative(&kd, t, r).unwrap();
            prop_assert!(k >= 0.0 && k <= t + 1e-12);
        }
    }
}
