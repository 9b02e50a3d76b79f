//! Discrepancies between an estimated and a reference density.

use std::io::Write;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_grid, fmt_num, linspace};
use crate::quadrature::{rule10, trapezoid};
use crate::special::{norm_cdf, norm_pdf, norm_quantile};

/// Uniform access to a univariate distribution for scoring.
pub trait Density {
    fn pdf(&self, x: f64) -> f64;

    fn cdf(&self, x: f64) -> f64;

    /// Generalized inverse of the CDF; bisection unless overridden.
    fn quantile(&self, u: f64) -> f64 {
        bisect_quantile(self, u)
    }

    /// Interval holding essentially all of the mass; a starting bracket for quantiles.
    fn support(&self) -> (f64, f64);
}

impl<D: Density + ?Sized> Density for &D {
    fn pdf(&self, x: f64) -> f64 {
        (**self).pdf(x)
    }
    fn cdf(&self, x: f64) -> f64 {
        (**self).cdf(x)
    }
    fn quantile(&self, u: f64) -> f64 {
        (**self).quantile(u)
    }
    fn support(&self) -> (f64, f64) {
        (**self).support()
    }
}

/// Smallest `x` with `cdf(x) >= u`, to relative precision ~1e-13.
pub fn bisect_quantile<D: Density + ?Sized>(d: &D, u: f64) -> f64 {
    let (mut lo, mut hi) = d.support();
    let mut width = (hi - lo).max(1.0);
    while d.cdf(lo) >= u && width < 1e300 {
        lo -= width;
        width *= 2.0;
    }
    while d.cdf(hi) < u && width < 1e300 {
        hi += width;
        width *= 2.0;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-13 * mid.abs().max(1e-3) {
            break;
        }
        if d.cdf(mid) >= u {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `N(mean, sd²)`.
#[derive(Debug, Clone, Copy)]
pub struct Normal {
    pub mean: f64,
    pub sd: f64,
}

impl Density for Normal {
    fn pdf(&self, x: f64) -> f64 {
        norm_pdf((x - self.mean) / self.sd) / self.sd
    }
    fn cdf(&self, x: f64) -> f64 {
        norm_cdf((x - self.mean) / self.sd)
    }
    fn quantile(&self, u: f64) -> f64 {
        self.mean + self.sd * norm_quantile(u)
    }
    fn support(&self) -> (f64, f64) {
        (self.mean - 40.0 * self.sd, self.mean + 40.0 * self.sd)
    }
}

/// Uniform on `[lo, hi]`.
#[derive(Debug, Clone, Copy)]
pub struct Uniform {
    pub lo: f64,
    pub hi: f64,
}

impl Density for Uniform {
    fn pdf(&self, x: f64) -> f64 {
        if (self.lo..=self.hi).contains(&x) {
            1.0 / (self.hi - self.lo)
        } else {
            0.0
        }
    }
    fn cdf(&self, x: f64) -> f64 {
        ((x - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
    fn quantile(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }
    fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

/// Point mass at `at`; only its CDF and quantile are meaningful.
#[derive(Debug, Clone, Copy)]
pub struct PointMass {
    pub at: f64,
}

impl Density for PointMass {
    fn pdf(&self, x: f64) -> f64 {
        if x == self.at {
            f64::INFINITY
        } else {
            0.0
        }
    }
    fn cdf(&self, x: f64) -> f64 {
        if x >= self.at {
            1.0
        } else {
            0.0
        }
    }
    fn quantile(&self, _u: f64) -> f64 {
        self.at
    }
    fn support(&self) -> (f64, f64) {
        (self.at, self.at)
    }
}

/// Reporting grid: 4001 equispaced points on `[-10, 10]`.
pub fn default_grid() -> Vec<f64> {
    linspace(-10.0, 10.0, 4001)
}

/// Default grid extended by geometrically spaced tail points out to ±`reach`, so
/// estimates stored on it keep their tail mass for quantile-based metrics.
pub fn extended_grid(reach: f64) -> Vec<f64> {
    symmetric_grid(10.0, 4001, reach)
}

/// `n_core` equispaced points on `[-half, half]` plus tail points growing by 8%
/// per step out to ±`reach`.
pub fn symmetric_grid(half: f64, n_core: usize, reach: f64) -> Vec<f64> {
    let mut tail = Vec::new();
    let mut x = half;
    while x < reach {
        x = (x * 1.08).min(reach);
        tail.push(x);
    }
    let mut grid: Vec<f64> = tail.iter().rev().map(|v| -v).collect();
    grid.extend(linspace(-half, half, n_core));
    grid.extend(tail);
    grid
}

fn on_grid<D: Density + ?Sized>(d: &D, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&x| d.pdf(x)).collect()
}

fn checked(grid: &[f64]) -> Result<()> {
    check_grid(grid)?;
    if grid.len() < 2 {
        return Err(Error::usage("metric grid needs at least two points"));
    }
    Ok(())
}

/// Integrated absolute error `∫|f1 − f2|` by the trapezoid rule on `grid`.
pub fn iae<A: Density + ?Sized, B: Density + ?Sized>(f1: &A, f2: &B, grid: &[f64]) -> Result<f64> {
    checked(grid)?;
    let d: Vec<f64> = on_grid(f1, grid)
        .into_iter()
        .zip(on_grid(f2, grid))
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(trapezoid(grid, &d))
}

/// Root integrated squared error `sqrt(∫(f1 − f2)²)`.
pub fn rise<A: Density + ?Sized, B: Density + ?Sized>(f1: &A, f2: &B, grid: &[f64]) -> Result<f64> {
    checked(grid)?;
    let d: Vec<f64> = on_grid(f1, grid)
        .into_iter()
        .zip(on_grid(f2, grid))
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(trapezoid(grid, &d).max(0.0).sqrt())
}

/// Hellinger distance `h` with `h² = ½ ∫(√f1 − √f2)²`, clamped to `[0, 1]`.
pub fn hellinger<A: Density + ?Sized, B: Density + ?Sized>(f1: &A, f2: &B, grid: &[f64]) -> Result<f64> {
    checked(grid)?;
    let d: Vec<f64> = on_grid(f1, grid)
        .into_iter()
        .zip(on_grid(f2, grid))
        .map(|(a, b)| {
            let r = a.max(0.0).sqrt() - b.max(0.0).sqrt();
            r * r
        })
        .collect();
    Ok((0.5 * trapezoid(grid, &d)).clamp(0.0, 1.0).sqrt())
}

const W2_PANELS: usize = 1000;

// 10-point Gauss–Legendre on each of 1000 equal panels of (0, 1)
fn w2_nodes() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| {
        let rule = rule10();
        let h = 1.0 / W2_PANELS as f64;
        let mut u = Vec::with_capacity(W2_PANELS * rule.len());
        let mut w = Vec::with_capacity(W2_PANELS * rule.len());
        for p in 0..W2_PANELS {
            for (x, wt) in rule.mapped(p as f64 * h, (p + 1) as f64 * h) {
                u.push(x);
                w.push(wt);
            }
        }
        (u, w)
    })
}

/// Wasserstein-2 distance `(∫₀¹ (F1⁻¹(u) − F2⁻¹(u))² du)^{1/2}` by quantile quadrature.
pub fn wasserstein2<A: Density + ?Sized, B: Density + ?Sized>(f1: &A, f2: &B) -> f64 {
    let (u, w) = w2_nodes();
    u.iter()
        .zip(w)
        .map(|(&u, &w)| {
            let d = f1.quantile(u) - f2.quantile(u);
            w * d * d
        })
        .sum::<f64>()
        .max(0.0)
        .sqrt()
}

/// `P(|X| > τ) = 1 − F(τ) + F(−τ)`.
pub fn exceedance_prob<D: Density + ?Sized>(d: &D, threshold: f64) -> f64 {
    (1.0 - d.cdf(threshold) + d.cdf(-threshold)).clamp(0.0, 1.0)
}

/// `|P_est(|X| > τ) − P_true(|X| > τ)|`.
pub fn exceedance_diff<A: Density + ?Sized, B: Density + ?Sized>(
    f_est: &A,
    f_true: &B,
    threshold: f64,
) -> Result<f64> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::usage(format!("exceedance threshold must be positive, got {threshold}")));
    }
    Ok((exceedance_prob(f_est, threshold) - exceedance_prob(f_true, threshold)).abs())
}

/// The five discrepancies of one estimate against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iae: f64,
    pub rise: f64,
    pub w2: f64,
    pub hellinger: f64,
    /// Present when the scenario defines an exceedance threshold.
    pub exceedance: Option<f64>,
}

pub fn score<A: Density + ?Sized, B: Density + ?Sized>(
    est: &A,
    truth: &B,
    grid: &[f64],
    threshold: Option<f64>,
) -> Result<Scores> {
    Ok(Scores {
        iae: iae(est, truth, grid)?,
        rise: rise(est, truth, grid)?,
        w2: wasserstein2(est, truth),
        hellinger: hellinger(est, truth, grid)?,
        exceedance: threshold.map(|t| exceedance_diff(est, truth, t)).transpose()?,
    })
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub n: usize,
    pub rep: usize,
    pub method: String,
    pub scores: Scores,
}

pub const METRIC_HEADER: &str = "scenario,n,rep,method,iae,rise,w2,hellinger,exceedance";

impl MetricRow {
    pub fn write_header<W: Write>(mut out: W) -> Result<()> {
        writeln!(out, "{METRIC_HEADER}")?;
        Ok(())
    }

    /// Exceedance is left empty for scenarios without a threshold.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let s = &self.scores;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            self.scenario,
            self.n,
            self.rep,
            self.method,
            fmt_num(s.iae),
            fmt_num(s.rise),
            fmt_num(s.w2),
            fmt_num(s.hellinger),
            s.exceedance.map(fmt_num).unwrap_or_default()
        )?;
        Ok(())
    }
}

/// Mean and sample SD of one metric for one method across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub scenario: String,
    pub n: usize,
    pub method: String,
    pub metric: &'static str,
    pub mean: f64,
    pub sd: f64,
    pub reps: usize,
}

pub const SUMMARY_HEADER: &str = "scenario,n,method,metric,mean,sd,reps";

impl MetricSummary {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            self.scenario,
            self.n,
            self.method,
            self.metric,
            fmt_num(self.mean),
            fmt_num(self.sd),
            self.reps
        )?;
        Ok(())
    }
}

/// Groups rows by (scenario, n, method) in first-seen order and reports each
/// metric's mean and SD (n − 1 denominator; 0 for a single replicate).
pub fn summarize(rows: &[MetricRow]) -> Vec<MetricSummary> {
    let mut keys: Vec<(&str, usize, &str)> = Vec::new();
    for r in rows {
        let key = (r.scenario.as_str(), r.n, r.method.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let metrics: [(&'static str, fn(&Scores) -> Option<f64>); 5] = [
        ("iae", |s| Some(s.iae)),
        ("rise", |s| Some(s.rise)),
        ("w2", |s| Some(s.w2)),
        ("hellinger", |s| Some(s.hellinger)),
        ("exceedance", |s| s.exceedance),
    ];
    let mut out = Vec::new();
    for (scenario, n, method) in keys {
        let group: Vec<&Scores> = rows
            .iter()
            .filter(|r| r.scenario == scenario && r.n == n && r.method == method)
            .map(|r| &r.scores)
            .collect();
        for (name, get) in metrics {
            let vals: Vec<f64> = group.iter().filter_map(|s| get(s)).collect();
            if vals.is_empty() {
                continue;
            }
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            out.push(MetricSummary {
                scenario: scenario.to_string(),
                n,
                method: method.to_string(),
                metric: name,
                mean,
                sd,
                reps: vals.len(),
            });
        }
    }
    out
}
