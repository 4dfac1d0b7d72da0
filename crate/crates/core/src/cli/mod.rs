//! The `wickmart` command line.
//!
//! Every numeric flag can also come from a JSON config file (`--config`) whose keys
//! are the long flag names; flags override the file. The seed falls back to
//! `WICKMART_SEED` and then to 7.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::coupling::{
    line_hit_mc, line_hit_prob, lipschitz_probe, parallel_summary, tau_exceedance, tau_scaling, two_boundary_mc,
    two_boundary_prob, two_boundary_prob_mirrored,
};
use crate::envelope::{calibrate_cone, zero_envelope, ConeConfig};
use crate::estimators::{mgf_curve, neg_exp_moment};
use crate::gff::{functional_samples, kernel_report, sample_field, FieldSampler, GridDomain, KernelDecomposition};
use crate::paths::{hitting_counts, simulate_functionals, SimConfig};
use crate::verify::{verify_all, Profile};
use crate::wickpoly::{wick_order, Polynomial};
use crate::{Error, ExactPolynomial, ExactWick, Result};

pub const DEFAULT_SEED: u64 = 7;
pub const SEED_ENV: &str = "WICKMART_SEED";

#[derive(Debug, Parser)]
#[command(name = "wickmart", version, about = "Wick polynomial martingales, couplings and field moments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Master seed (default: $WICKMART_SEED, then 7).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: hardware count).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with flag values; flags on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Write the payload here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Wick polynomial expansion and evaluation.
    #[command(subcommand)]
    Wick(WickCmd),
    /// Zero envelope f_R(t) on a time grid (CSV).
    Envelope(EnvelopeArgs),
    /// Calibrate the cone offset A and write the cone config (JSON).
    ConeCalibrate(ConeArgs),
    #[command(subcommand)]
    Paths(PathsCmd),
    #[command(subcommand)]
    Coupling(CouplingCmd),
    #[command(subcommand)]
    Gff(GffCmd),
    #[command(subcommand)]
    Moments(MomentsCmd),
    /// Run the acceptance checks and print a PASS/FAIL table.
    VerifyAll(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PolyArg {
    /// Degree-ascending coefficients, leading coefficient exactly 1 (e.g. "0,0,0,0,1").
    #[arg(long, allow_hyphen_values = true)]
    pub poly: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ConeArg {
    /// Cone config written by `cone-calibrate` (default: calibrate on [0, 50]).
    #[arg(long)]
    pub cone: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub tmax: Option<f64>,
    #[arg(long)]
    pub paths: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum WickCmd {
    /// Print the terms of P_R(x; t) (JSON).
    Expand(PolyArg),
    /// Print P_R(x; t).
    Eval {
        #[command(flatten)]
        poly: PolyArg,
        #[arg(long, allow_hyphen_values = true)]
        x: Option<f64>,
        #[arg(long)]
        t: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct EnvelopeArgs {
    #[command(flatten)]
    pub poly: PolyArg,
    /// Explicit times, "a,b,c" or "start:step:stop".
    #[arg(long)]
    pub t: Option<String>,
    #[arg(long)]
    pub tmax: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ConeArgs {
    #[command(flatten)]
    pub poly: PolyArg,
    #[arg(long)]
    pub tmax: Option<f64>,
    /// Slopes ε for the A'(ε) table, comma separated.
    #[arg(long)]
    pub eps: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum PathsCmd {
    /// Per-path decomposition functionals (CSV).
    Simulate {
        #[command(flatten)]
        poly: PolyArg,
        #[command(flatten)]
        cone: ConeArg,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Cone hits per unit window (CSV); `--format json` adds the halving ratios.
    HittingStats {
        #[command(flatten)]
        poly: PolyArg,
        #[command(flatten)]
        cone: ConeArg,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, alias = "m-max")]
        mmax: Option<u32>,
    },
}

#[derive(Debug, Subcommand)]
pub enum CouplingCmd {
    /// P[τ > T_cap] for one gap, or a line fit over several (JSON).
    Tau {
        #[command(flatten)]
        poly: PolyArg,
        #[command(flatten)]
        cone: ConeArg,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, conflicts_with = "gaps")]
        gap: Option<f64>,
        #[arg(long)]
        gaps: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        center: Option<f64>,
        #[arg(long)]
        t_offset: Option<f64>,
    },
    /// Exit probability of z + B_s − s through the line, or through l before 0 with --l (JSON).
    Exit {
        #[arg(long, allow_hyphen_values = true)]
        z: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        l: Option<f64>,
        /// Drift of the two-boundary motion, −1 or +1.
        #[arg(long, allow_hyphen_values = true)]
        drift: Option<f64>,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Parallel coupling exit statistics (JSON).
    Parallel {
        #[command(flatten)]
        poly: PolyArg,
        #[command(flatten)]
        cone: ConeArg,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, allow_hyphen_values = true)]
        z1: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        z2: Option<f64>,
        #[arg(long)]
        t_offset: Option<f64>,
    },
    /// Lipschitz probe of the high-value sum in the start point (CSV; JSON adds the fit).
    Lipschitz {
        #[command(flatten)]
        poly: PolyArg,
        #[command(flatten)]
        cone: ConeArg,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long, allow_hyphen_values = true, alias = "z-grid")]
        zgrid: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum GffCmd {
    /// Kernel decomposition diagnostics (JSON).
    KernelCheck {
        #[arg(long)]
        tmax: Option<f64>,
        #[arg(long)]
        grid: Option<usize>,
        /// Same as --out.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// D_t samples on the unit square (CSV), optionally dumping raw fields.
    Simulate {
        #[command(flatten)]
        poly: PolyArg,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        replicas: Option<u64>,
        /// Directory for `replica-<i>.bin` dumps with JSON headers.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        dump_count: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum MomentsCmd {
    /// Log-MGF curve of a sample column (JSON).
    Mgf {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Column name (default: the last column).
        #[arg(long)]
        column: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        alphas: Option<String>,
    },
    /// E[exp(−αD_t)] at several scale-times (CSV).
    Negexp {
        #[command(flatten)]
        poly: PolyArg,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        t: Option<String>,
        #[arg(long)]
        replicas: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
}

/// Flag values merged with the config file.
#[derive(Debug, Default)]
pub struct Settings {
    file: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        match serde_json::from_str::<Value>(&std::fs::read_to_string(path)?)? {
            Value::Object(file) => Ok(Self { file }),
            _ => Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
        }
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        self.file.get(key).or_else(|| self.file.get(&key.replace('-', "_")))
    }

    pub fn f64(&self, key: &str, flag: Option<f64>, default: Option<f64>) -> Result<f64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Config(format!("config key {key:?} must be a number"))),
            None => default.ok_or_else(|| missing(key)),
        }
    }

    pub fn u64(&self, key: &str, flag: Option<u64>, default: Option<u64>) -> Result<u64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Config(format!("config key {key:?} must be a non-negative integer"))),
            None => default.ok_or_else(|| missing(key)),
        }
    }

    pub fn string(&self, key: &str, flag: Option<&str>, default: Option<&str>) -> Result<String> {
        if let Some(v) = flag {
            return Ok(v.to_string());
        }
        match self.raw(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(Error::Config(format!("config key {key:?} must be a string, got {other}"))),
            None => default.map(str::to_string).ok_or_else(|| missing(key)),
        }
    }

    /// A list given as "a,b,c", "start:step:stop", or a JSON array in the file.
    pub fn list(&self, key: &str, flag: Option<&str>, default: Option<&str>) -> Result<Vec<f64>> {
        if flag.is_none() {
            if let Some(Value::Array(items)) = self.raw(key) {
                return items
                    .iter()
                    .map(|v| {
                        v.as_f64()
                            .ok_or_else(|| Error::Config(format!("config key {key:?} must hold numbers")))
                    })
                    .collect();
            }
        }
        parse_list(&self.string(key, flag, default)?)
    }

    /// Like [`Settings::list`] but `None` when neither the flag nor the file sets it.
    pub fn opt_list(&self, key: &str, flag: Option<&str>) -> Result<Option<Vec<f64>>> {
        if flag.is_none() && self.raw(key).is_none() {
            return Ok(None);
        }
        self.list(key, flag, None).map(Some)
    }

    pub fn path(&self, key: &str, flag: Option<&Path>) -> Result<Option<PathBuf>> {
        if let Some(p) = flag {
            return Ok(Some(p.to_path_buf()));
        }
        match self.raw(key) {
            Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
            Some(other) => Err(Error::Config(format!("config key {key:?} must be a path, got {other}"))),
            None => Ok(None),
        }
    }
}

fn missing(key: &str) -> Error {
    Error::Config(format!("missing required flag --{key}"))
}

/// Parses "a,b,c" or the inclusive range "start:step:stop".
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    let num = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number {x:?} in {s:?}")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, h, b] => {
            let (a, h, b) = (num(a)?, num(h)?, num(b)?);
            if !(h > 0.0) || b < a {
                return Err(Error::Config(format!("range {s:?} needs step > 0 and stop ≥ start")));
            }
            let n = ((b - a) / h + 1e-9).floor() as i64;
            // round away accumulated binary noise so "-0.2:0.05:0.2" yields 0.15, not 0.15000000000000002
            Ok((0..=n).map(|k| ((a + k as f64 * h) * 1e12).round() / 1e12).collect())
        }
        [_] => s.split(',').map(num).collect(),
        _ => Err(Error::Config(format!("cannot parse list {s:?}"))),
    }
}

/// Flag, then config file, then `WICKMART_SEED`, then 7.
pub fn resolve_seed(flag: Option<u64>, settings: &Settings) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if settings.raw("seed").is_some() {
        return settings.u64("seed", None, None);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// What a command produces.
pub enum Payload {
    Json(Value),
    Table { header: Vec<&'static str>, rows: Vec<Vec<Value>> },
    /// CSV by default, the full JSON document with `--format json`.
    Dual { json: Value, header: Vec<&'static str>, rows: Vec<Vec<Value>> },
    Text(String),
}

fn to_json<T: Serialize>(v: &T) -> Result<Payload> {
    Ok(Payload::Json(serde_json::to_value(v)?))
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn render(payload: Payload, format: Option<Format>) -> Result<Vec<u8>> {
    match (payload, format) {
        (Payload::Json(v), None | Some(Format::Json)) => Ok((serde_json::to_string_pretty(&v)? + "\n").into_bytes()),
        (Payload::Json(_), Some(Format::Csv)) => Err(Error::Config("this command only emits JSON".into())),
        (Payload::Table { header, rows }, None | Some(Format::Csv)) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
            w.write_record(&header).map_err(io)?;
            for r in &rows {
                w.write_record(r.iter().map(cell)).map_err(io)?;
            }
            w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
        }
        (Payload::Table { header, rows }, Some(Format::Json)) => {
            let records: Vec<Value> = rows
                .into_iter()
                .map(|r| Value::Object(header.iter().map(|h| h.to_string()).zip(r).collect()))
                .collect();
            Ok((serde_json::to_string_pretty(&records)? + "\n").into_bytes())
        }
        (Payload::Dual { json, .. }, Some(Format::Json)) => render(Payload::Json(json), None),
        (Payload::Dual { header, rows, .. }, _) => render(Payload::Table { header, rows }, None),
        (Payload::Text(s), _) => Ok(s.into_bytes()),
    }
}

struct Ctx {
    settings: Settings,
    seed: u64,
}

impl Ctx {
    fn poly(&self, arg: &PolyArg) -> Result<(ExactPolynomial, ExactWick)> {
        let r = Polynomial::parse(&self.settings.string("poly", arg.poly.as_deref(), None)?)?;
        let p = wick_order(&r);
        Ok((r, p))
    }

    fn cone(&self, arg: &ConeArg, r: &ExactPolynomial, p: &ExactWick) -> Result<ConeConfig> {
        match self.settings.path("cone", arg.cone.as_deref())? {
            Some(path) => {
                let cone = ConeConfig::load(&path)?;
                if let Some(poly) = &cone.poly {
                    if &Polynomial::parse(poly)? != r {
                        return Err(Error::Config(format!(
                            "cone file was calibrated for [{poly}], not [{}]",
                            r.render()
                        )));
                    }
                }
                Ok(cone)
            }
            None => calibrate_cone(p, 50.0, &[]),
        }
    }

    fn sim(&self, arg: &SimArgs, dt: f64, tmax: f64, paths: u64) -> Result<SimConfig> {
        SimConfig::new(
            self.settings.f64("dt", arg.dt, Some(dt))?,
            self.settings.f64("tmax", arg.tmax, Some(tmax))?,
            self.settings.u64("paths", arg.paths, Some(paths))?,
            self.seed,
        )
    }

    fn grid(&self, flag: Option<usize>, default: u64) -> Result<GridDomain> {
        GridDomain::unit_square(self.settings.u64("grid", flag.map(|g| g as u64), Some(default))? as usize)
    }
}

fn dispatch(cmd: &Command, ctx: &Ctx, out: Option<&Path>) -> Result<(Payload, bool)> {
    let s = &ctx.settings;
    let ok = |p: Payload| Ok((p, true));
    match cmd {
        Command::Wick(WickCmd::Expand(arg)) => {
            let (r, p) = ctx.poly(arg)?;
            ok(Payload::Json(json!({
                "poly": r.render(),
                "terms": p.expansion().terms(),
            })))
        }
        Command::Wick(WickCmd::Eval { poly, x, t }) => {
            let (_, p) = ctx.poly(poly)?;
            let x = s.f64("x", *x, None)?;
            let t = s.f64("t", *t, None)?;
            if !(t >= 0.0) {
                return Err(Error::Domain(format!("t must be ≥ 0, got {t}")));
            }
            let v: f64 = p.eval(x, t);
            ok(match s.raw("format").and_then(Value::as_str) {
                Some("json") => Payload::Json(json!({ "x": x, "t": t, "value": v })),
                _ => Payload::Text(format!("{v}\n")),
            })
        }
        Command::Envelope(a) => {
            let (_, p) = ctx.poly(&a.poly)?;
            let times = match s.opt_list("t", a.t.as_deref())? {
                Some(t) => t,
                None => {
                    let tmax = s.f64("tmax", a.tmax, Some(10.0))?;
                    let dt = s.f64("dt", a.dt, Some(0.1))?;
                    parse_list(&format!("0:{dt}:{tmax}"))?
                }
            };
            if let [t] = times[..] {
                return ok(Payload::Json(json!({ "t": t, "f": zero_envelope::<_, f64>(&p, t)? })));
            }
            let rows = times
                .iter()
                .map(|&t| Ok(vec![json!(t), json!(zero_envelope::<_, f64>(&p, t)?)]))
                .collect::<Result<Vec<_>>>()?;
            ok(Payload::Table {
                header: vec!["t", "f"],
                rows,
            })
        }
        Command::ConeCalibrate(a) => {
            let (r, p) = ctx.poly(&a.poly)?;
            let tmax = s.f64("tmax", a.tmax, Some(50.0))?;
            let eps = s.list("eps", a.eps.as_deref(), Some("0.5"))?;
            let mut cone = calibrate_cone(&p, tmax, &eps)?;
            cone.poly = Some(r.render());
            to_json(&cone).map(|p| (p, true))
        }
        Command::Paths(PathsCmd::Simulate { poly, cone, sim }) => {
            let (r, p) = ctx.poly(poly)?;
            let cone = ctx.cone(cone, &r, &p)?;
            let cfg = ctx.sim(sim, 1e-3, 10.0, 1000)?;
            let f = simulate_functionals(&cfg, &p, &cone)?;
            let rows = f
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    vec![
                        json!(i),
                        json!(x.d_t),
                        json!(x.d_l),
                        json!(x.d_h),
                        json!(x.q),
                        json!(x.r0),
                        json!(x.hits),
                        json!(x.ends_high),
                        json!(x.first_order_residual),
                    ]
                })
                .collect();
            ok(Payload::Table {
                header: vec!["path", "d_t", "d_l", "d_h", "q", "r0", "hits", "ends_high", "first_order_residual"],
                rows,
            })
        }
        Command::Paths(PathsCmd::HittingStats { poly, cone, sim, mmax }) => {
            let (r, p) = ctx.poly(poly)?;
            let cone = ctx.cone(cone, &r, &p)?;
            let cfg = ctx.sim(sim, 1e-3, 4.0, 10_000)?;
            let mmax = s.u64("mmax", mmax.map(u64::from), Some(cfg.t_max.floor() as u64))?;
            let stats = hitting_counts(&cfg, &p, &cone, mmax as u32)?;
            let rows = stats
                .rows
                .iter()
                .map(|r| vec![json!(r.m), json!(r.mean), json!(r.stderr), json!(r.bound)])
                .collect();
            ok(Payload::Dual {
                json: serde_json::to_value(&stats)?,
                header: vec!["m", "mean", "stderr", "bound"],
                rows,
            })
        }
        Command::Coupling(CouplingCmd::Tau {
            poly,
            cone,
            sim,
            gap,
            gaps,
            center,
            t_offset,
        }) => {
            let (r, p) = ctx.poly(poly)?;
            let cone = ctx.cone(cone, &r, &p)?;
            let cfg = ctx.sim(sim, 1e-3, 1.0, 10_000)?;
            let single = match gap {
                Some(g) => Some(*g),
                None if gaps.is_none() => s.raw("gap").map(|_| s.f64("gap", None, None)).transpose()?,
                None => None,
            };
            if let Some(g) = single {
                let center = s.f64("center", *center, Some(0.0))?;
                let t_offset = s.f64("t-offset", *t_offset, Some(1.0))?;
                let e = tau_exceedance(center - g / 2.0, center + g / 2.0, &cfg, &p, &cone, t_offset)?;
                return ok(Payload::Json(json!({
                    "gap": g,
                    "center": center,
                    "p_tau_gt_cap": e.mean,
                    "stderr": e.stderr,
                    "n": e.n,
                })));
            }
            let gaps = s.list("gaps", gaps.as_deref(), Some("0.05,0.1,0.2"))?;
            let center = s.f64("center", *center, Some(0.0))?;
            let t_offset = s.f64("t-offset", *t_offset, Some(1.0))?;
            to_json(&tau_scaling(&gaps, center, &cfg, &p, &cone, t_offset)?).map(|p| (p, true))
        }
        Command::Coupling(CouplingCmd::Exit { z, l, drift, sim }) => {
            let cfg = ctx.sim(sim, 1e-2, 50.0, 100_000)?;
            let z = s.f64("z", *z, Some(-0.5))?;
            let l = match l {
                Some(l) => Some(*l),
                None => s.raw("l").map(|_| s.f64("l", None, None)).transpose()?,
            };
            let (closed_form, mc) = match l {
                None => (line_hit_prob(z)?, line_hit_mc(z, &cfg)?),
                Some(l) => {
                    let drift = s.f64("drift", *drift, Some(-1.0))?;
                    let exact = if drift == -1.0 {
                        two_boundary_prob(z, l)?
                    } else if drift == 1.0 {
                        two_boundary_prob_mirrored(z, l)?
                    } else {
                        return Err(Error::Domain(format!("drift must be -1 or 1, got {drift}")));
                    };
                    (exact, two_boundary_mc(z, l, drift, &cfg)?)
                }
            };
            ok(Payload::Json(json!({
                "z": z,
                "l": l,
                "closed_form": closed_form,
                "mc": mc.mean,
                "stderr": mc.stderr,
                "n": mc.n,
            })))
        }
        Command::Coupling(CouplingCmd::Parallel {
            poly,
            cone,
            sim,
            z1,
            z2,
            t_offset,
        }) => {
            let (r, p) = ctx.poly(poly)?;
            let cone = ctx.cone(cone, &r, &p)?;
            let cfg = ctx.sim(sim, 1e-3, 10.0, 10_000)?;
            let z1 = s.f64("z1", *z1, Some(-0.1))?;
            let z2 = s.f64("z2", *z2, Some(0.1))?;
            let t_offset = s.f64("t-offset", *t_offset, Some(1.0))?;
            to_json(&parallel_summary(z1, z2, &cfg, &p, &cone, t_offset)?).map(|p| (p, true))
        }
        Command::Coupling(CouplingCmd::Lipschitz {
            poly,
            cone,
            sim,
            t,
            zgrid,
        }) => {
            let (r, p) = ctx.poly(poly)?;
            let cone = ctx.cone(cone, &r, &p)?;
            let cfg = ctx.sim(sim, 1e-2, 20.0, 10_000)?;
            let t = s.f64("t", *t, Some(0.0))?;
            let grid = match s.opt_list("zgrid", zgrid.as_deref())? {
                Some(g) => g,
                None => (0..5).map(|k| cone.g(t) * (0.2 + 0.1 * k as f64)).collect(),
            };
            let probe = lipschitz_probe(t, &grid, &cfg, &p, &cone)?;
            let rows = probe
                .points
                .iter()
                .map(|q| vec![json!(q.z), json!(q.f.mean), json!(q.f.stderr)])
                .collect();
            ok(Payload::Dual {
                json: serde_json::to_value(&probe)?,
                header: vec!["z", "f", "stderr"],
                rows,
            })
        }
        Command::Gff(GffCmd::KernelCheck { tmax, grid, .. }) => {
            let kd = KernelDecomposition::default();
            let tmax = s.f64("tmax", *tmax, Some(20.0))?;
            to_json(&kernel_report(&kd, &ctx.grid(*grid, 16)?, tmax)?).map(|p| (p, true))
        }
        Command::Gff(GffCmd::Simulate {
            poly,
            grid,
            t,
            replicas,
            dump,
            dump_count,
        }) => {
            let (_, p) = ctx.poly(poly)?;
            let kd = KernelDecomposition::default();
            let domain = ctx.grid(*grid, 16)?;
            let t = s.f64("t", *t, Some(4.0))?;
            let n = s.u64("replicas", *replicas, Some(1000))?;
            let sampler = FieldSampler::new(&kd, &domain, t)?;
            let d = functional_samples(&sampler, &p, &[t], n, ctx.seed)?.remove(0);
            if let Some(dir) = s.path("dump", dump.as_deref())? {
                std::fs::create_dir_all(&dir)?;
                for i in 0..s.u64("dump-count", *dump_count, Some(1))?.min(n) {
                    sample_field(&sampler, t, ctx.seed, i)?.save(&dir.join(format!("replica-{i}.bin")))?;
                }
            }
            let rows = d.iter().enumerate().map(|(i, v)| vec![json!(i), json!(v)]).collect();
            ok(Payload::Table {
                header: vec!["replica", "d_t"],
                rows,
            })
        }
        Command::Moments(MomentsCmd::Mgf { input, column, alphas }) => {
            let input = s
                .path("input", input.as_deref())?
                .ok_or_else(|| missing("input"))?;
            let column = s.string("column", column.as_deref(), Some("")).ok().filter(|c| !c.is_empty());
            let samples = read_column(&input, column.as_deref())?;
            let alphas = s.list("alphas", alphas.as_deref(), Some("-0.2:0.05:0.2"))?;
            to_json(&mgf_curve(&samples, &alphas, ctx.seed)?).map(|p| (p, true))
        }
        Command::Moments(MomentsCmd::Negexp {
            poly,
            alpha,
            grid,
            t,
            replicas,
        }) => {
            let (_, p) = ctx.poly(poly)?;
            let kd = KernelDecomposition::default();
            let alpha = s.f64("alpha", *alpha, Some(0.05))?;
            let times = s.list("t", t.as_deref(), Some("2,4,6"))?;
            let n = s.u64("replicas", *replicas, Some(1000))?;
            let t_max = times.iter().copied().fold(0.0, f64::max);
            let sampler = FieldSampler::new(&kd, &ctx.grid(*grid, 16)?, t_max)?;
            let rows = neg_exp_moment(alpha, &times, &sampler, &p, n, ctx.seed)?
                .iter()
                .map(|r| {
                    vec![
                        json!(r.t),
                        json!(r.moment.estimate.mean),
                        json!(r.moment.estimate.stderr),
                        json!(r.moment.ci_low),
                        json!(r.moment.ci_high),
                        json!(r.moment.ess),
                        json!(if r.moment.reliable { "ok" } else { "UNRELIABLE" }),
                        json!(r.mean_d),
                        json!(r.jensen_ok),
                    ]
                })
                .collect();
            ok(Payload::Table {
                header: vec!["t", "estimate", "stderr", "ci_low", "ci_high", "ess", "status", "mean_d", "jensen_ok"],
                rows,
            })
        }
        Command::VerifyAll(a) => {
            let profile = match a.profile {
                Some(p) => p,
                None => match s.string("profile", None, Some("quick"))?.as_str() {
                    "full" => Profile::Full,
                    "quick" => Profile::Quick,
                    other => return Err(Error::Config(format!("unknown profile {other:?}"))),
                },
            };
            // stream the table; the payload is the JSON report when --out is set
            let report = verify_all(profile, ctx.seed, |r| {
                println!(
                    "{} {:>2} {:<28} {:>7.1}s  {}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.id,
                    r.name,
                    r.seconds,
                    r.detail
                );
            });
            let passed = report.results.iter().filter(|r| r.pass).count();
            println!("{passed}/{} passed", report.results.len());
            let all = report.all_pass();
            if out.is_some() {
                Ok((to_json(&report)?, all))
            } else {
                Ok((Payload::Text(String::new()), all))
            }
        }
    }
}

/// Reads one numeric column from a CSV file with a header row.
pub fn read_column(path: &Path, column: Option<&str>) -> Result<Vec<f64>> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let header = r.headers().map_err(io)?.clone();
    let idx = match column {
        Some(c) => header
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| Error::Config(format!("no column {c:?} in {}", path.display())))?,
        None => header
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Config(format!("{} has no columns", path.display())))?,
    };
    r.records()
        .map(|rec| {
            let rec = rec.map_err(io)?;
            let field = rec.get(idx).unwrap_or("");
            field
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("non-numeric value {field:?} in {}", path.display())))
        })
        .collect()
}

fn usage_for(args: &[String]) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let mut current = cmd;
    for a in args.iter().skip(1).filter(|a| !a.starts_with('-')) {
        match current.find_subcommand(a) {
            Some(sub) => current = sub.clone(),
            None => break,
        }
    }
    current.render_usage().to_string()
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(&e, Error::Config(m) if m.starts_with("missing required flag")) {
                eprintln!("\n{}", usage_for(&args));
            }
            e.exit_code()
        }
    }
}

/// Runs a parsed command. `Ok(false)` means the command ran but a check failed.
pub fn execute(cli: &Cli) -> Result<bool> {
    let settings = Settings::load(cli.common.config.as_deref())?;
    let seed = resolve_seed(cli.common.seed, &settings)?;
    let threads = match cli.common.threads {
        Some(t) => Some(t as u64),
        None => settings.raw("threads").map(|_| settings.u64("threads", None, None)).transpose()?,
    };
    if let Some(t) = threads {
        // a second call in one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t as usize).build_global();
    }
    let out = match &cli.command {
        Command::Gff(GffCmd::KernelCheck { report: Some(r), .. }) => Some(r.clone()),
        _ => settings.path("out", cli.common.out.as_deref())?,
    };
    let format = match cli.common.format {
        Some(f) => Some(f),
        None => match settings.raw("format").and_then(Value::as_str) {
            Some("json") => Some(Format::Json),
            Some("csv") => Some(Format::Csv),
            Some(other) => return Err(Error::Config(format!("unknown format {other:?}"))),
            None => None,
        },
    };
    let mut settings = settings;
    if let Some(f) = format {
        settings.file.insert("format".into(), json!(f));
    }
    let ctx = Ctx { settings, seed };
    let (payload, pass) = dispatch(&cli.command, &ctx, out.as_deref())?;
    let bytes = render(payload, format)?;
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(pass)
}
