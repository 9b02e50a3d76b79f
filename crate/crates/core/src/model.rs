//! Hierarchical model types and evaluation of the latent and observed densities.
//!
//! The latent density is a mixture of symmetric uniforms `U(-θ, θ)` with
//! `θ ~ Σ p_k Ga(α_k, β_k)`. Integrating θ out gives the closed form
//!
//! ```text
//! f(x) = Σ_k p_k β_k / (2 (α_k − 1)) · Q(α_k − 1, β_k |x|)
//! ```
//!
//! with `Q` the regularized upper incomplete gamma, valid since every `α_k > 1`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Density;
use crate::quadrature;
use crate::special::{gamma_pq_with_lgamma, ln_gamma, norm_cdf, norm_pdf, norm_quantile};

/// Noise family `Ψ`. Scales are standard deviations and live in [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKernel {
    Normal,
    Laplace,
}

impl ErrorKernel {
    /// Laplace scale `b` with `2 b² = sd²`; the standard deviation for Normal.
    pub fn scale(self, sd: f64) -> f64 {
        match self {
            ErrorKernel::Normal => sd,
            ErrorKernel::Laplace => sd / std::f64::consts::SQRT_2,
        }
    }

    /// Density of the noise at deviation `d` from the center.
    pub fn pdf(self, d: f64, sd: f64) -> f64 {
        match self {
            ErrorKernel::Normal => norm_pdf(d / sd) / sd,
            ErrorKernel::Laplace => {
                let b = self.scale(sd);
                (-d.abs() / b).exp() / (2.0 * b)
            }
        }
    }

    pub fn cdf(self, d: f64, sd: f64) -> f64 {
        match self {
            ErrorKernel::Normal => norm_cdf(d / sd),
            ErrorKernel::Laplace => {
                let b = self.scale(sd);
                if d < 0.0 {
                    0.5 * (d / b).exp()
                } else {
                    1.0 - 0.5 * (-d / b).exp()
                }
            }
        }
    }

    pub fn quantile(self, u: f64, sd: f64) -> f64 {
        match self {
            ErrorKernel::Normal => sd * norm_quantile(u),
            ErrorKernel::Laplace => {
                let b = self.scale(sd);
                if u < 0.5 {
                    b * (2.0 * u).ln()
                } else {
                    -b * (2.0 * (1.0 - u)).ln()
                }
            }
        }
    }

    /// Characteristic function (real, the family is symmetric).
    pub fn char_fn(self, t: f64, sd: f64) -> f64 {
        match self {
            ErrorKernel::Normal => (-0.5 * sd * sd * t * t).exp(),
            ErrorKernel::Laplace => {
                let b = self.scale(sd);
                1.0 / (1.0 + b * b * t * t)
            }
        }
    }

    /// Half-width in standard deviations beyond which the noise mass is negligible.
    fn effective_halfwidth(self) -> f64 {
        match self {
            ErrorKernel::Normal => 10.0,
            ErrorKernel::Laplace => 40.0,
        }
    }
}

impl std::str::FromStr for ErrorKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(ErrorKernel::Normal),
            "laplace" => Ok(ErrorKernel::Laplace),
            other => Err(Error::usage(format!("unknown error family `{other}`"))),
        }
    }
}

/// Observed values `w` with their known noise standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    w: Vec<f64>,
    sigma: Vec<f64>,
}

impl Dataset {
    pub fn new(w: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::usage("dataset must contain at least one observation"));
        }
        if w.len() != sigma.len() {
            return Err(Error::usage(format!(
                "dataset has {} observations but {} noise scales",
                w.len(),
                sigma.len()
            )));
        }
        if let Some(i) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::usage(format!("observation {i} is not finite")));
        }
        if let Some(i) = sigma.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::usage(format!(
                "noise scale {i} must be positive and finite, got {}",
                sigma[i]
            )));
        }
        Ok(Self { w, sigma })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn median_sigma(&self) -> f64 {
        let mut s = self.sigma.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }

    /// Reads a CSV with at least the columns `w` and `sigma` (others are ignored).
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_error)?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("missing column `{name}`")))
        };
        let (iw, is) = (col("w")?, col("sigma")?);
        let mut w = Vec::new();
        let mut sigma = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            w.push(parse_field(&rec, iw, line)?);
            sigma.push(parse_field(&rec, is, line)?);
        }
        Dataset::new(w, sigma)
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

pub(crate) fn parse_field(rec: &csv::StringRecord, idx: usize, line: usize) -> Result<f64> {
    let raw = rec
        .get(idx)
        .ok_or_else(|| Error::Parse(format!("row {}: missing field {idx}", line + 1)))?;
    raw.parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {}: `{raw}` is not a number", line + 1)))
}

/// Numbers written to CSV: plain decimals, scientific form only for tiny magnitudes.
pub fn fmt_num(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-6 {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Hyperparameters `(λ, t, Ξ₁, Ξ₂, K, m)` of the finite Dirichlet mixture of Gammas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Rate of the truncated exponential prior on each `α_k`.
    pub lambda: f64,
    /// Lower truncation of `α_k`; must exceed 1.
    pub t: f64,
    /// Shape of the Gamma prior on `β_k`.
    pub xi1: f64,
    /// Rate of the Gamma prior on `β_k`.
    pub xi2: f64,
    /// Number of mixture components.
    pub k: usize,
    /// Total Dirichlet concentration, split evenly as `m / K`.
    pub m: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { lambda: 2.0, t: 2.5, xi1: 1.0, xi2: 4.0, k: 8, m: 20.0 }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lambda", self.lambda), ("xi1", self.xi1), ("xi2", self.xi2), ("m", self.m)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        if !(self.t > 1.0 && self.t.is_finite()) {
            return Err(Error::usage(format!("hyperparameter t must exceed 1, got {}", self.t)));
        }
        if self.k == 0 {
            return Err(Error::usage("hyperparameter K must be at least 1"));
        }
        Ok(())
    }
}

/// Mixture weights, shapes and rates of the Gamma mixing density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl MixtureParams {
    /// Validated parameters; `alpha` must exceed 1 so the latent density is finite.
    pub fn new(p: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let params = Self { p, alpha, beta };
        params.validate(1.0)?;
        Ok(params)
    }

    pub fn k(&self) -> usize {
        self.p.len()
    }

    /// Checks the simplex, `α_k > t` and `β_k > 0`.
    pub fn validate(&self, t: f64) -> Result<()> {
        let k = self.p.len();
        if k == 0 || self.alpha.len() != k || self.beta.len() != k {
            return Err(Error::usage("mixture parameters need K >= 1 components of equal length"));
        }
        if self.p.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::usage("mixture weights must be nonnegative"));
        }
        let total: f64 = self.p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::usage(format!("mixture weights sum to {total}, not 1")));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(**a > t && a.is_finite())) {
            return Err(Error::usage(format!("shape {a} does not exceed {t}")));
        }
        if let Some(b) = self.beta.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::usage(format!("rate {b} must be positive")));
        }
        Ok(())
    }
}

/// Per-observation latents: `x_i`, `θ_i` and the 0-based component label `z_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub z: Vec<usize>,
}

impl LatentState {
    /// Checks `|x_i| ≤ θ_i`, `θ_i > 0` and `z_i < k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        let n = self.x.len();
        if self.theta.len() != n || self.z.len() != n {
            return Err(Error::usage("latent state vectors have mismatched lengths"));
        }
        for i in 0..n {
            if !(self.theta[i] > 0.0) || !(self.x[i].abs() <= self.theta[i]) {
                return Err(Error::numeric(format!(
                    "latent {i} violates |x| <= theta: x={}, theta={}",
                    self.x[i], self.theta[i]
                )));
            }
            if self.z[i] >= k {
                return Err(Error::numeric(format!("label {} of latent {i} out of range", self.z[i])));
            }
        }
        Ok(())
    }
}

/// Chain settings recorded alongside the kept draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsMeta {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub chain: u64,
    /// Stride of the stored latent `x` snapshots, if any were kept.
    pub latent_thin: Option<usize>,
    /// Metropolis–Hastings acceptance rate of each `α_k` over all sweeps.
    pub alpha_acceptance: Vec<f64>,
    /// Number of `x_i` updates that fell back to the boundary clamp.
    pub clamped_x: usize,
}

/// Thinned post-burn-in output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub draws: Vec<MixtureParams>,
    /// Snapshots of the latent `x` vector, one per `latent_thin` sweeps after burn-in.
    pub latent_x: Vec<Vec<f64>>,
    pub meta: DrawsMeta,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Long-format CSV: `iter,k,p,alpha,beta` with 1-based component index.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,k,p,alpha,beta")?;
        for (j, d) in self.draws.iter().enumerate() {
            let iter = self.meta.burn_in + j * self.meta.thin;
            for k in 0..d.k() {
                writeln!(
                    out,
                    "{iter},{},{},{},{}",
                    k + 1,
                    fmt_num(d.p[k]),
                    fmt_num(d.alpha[k]),
                    fmt_num(d.beta[k])
                )?;
            }
        }
        Ok(())
    }

    /// Reads draws written by [`PosteriorDraws::write_csv`]; `meta` comes from the sidecar.
    pub fn read_csv<R: Read>(reader: R, meta: DrawsMeta) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_error)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["iter", "k", "p", "alpha", "beta"] {
            return Err(Error::Parse("draws CSV must have header iter,k,p,alpha,beta".into()));
        }
        let mut draws: Vec<MixtureParams> = Vec::new();
        let mut current: Option<f64> = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            let iter = parse_field(&rec, 0, line)?;
            if current != Some(iter) {
                draws.push(MixtureParams { p: vec![], alpha: vec![], beta: vec![] });
                current = Some(iter);
            }
            let d = draws.last_mut().expect("draw pushed above");
            d.p.push(parse_field(&rec, 2, line)?);
            d.alpha.push(parse_field(&rec, 3, line)?);
            d.beta.push(parse_field(&rec, 4, line)?);
        }
        for d in &draws {
            d.validate(1.0)
                .map_err(|e| Error::Parse(format!("invalid draw in CSV: {e}")))?;
        }
        Ok(Self { draws, latent_x: Vec::new(), meta })
    }
}

/// Latent density of one parameter draw with per-component constants cached.
#[derive(Debug, Clone)]
pub struct LatentDensity {
    comps: Vec<Component>,
}

#[derive(Debug, Clone)]
struct Component {
    p: f64,
    alpha: f64,
    beta: f64,
    // p β / (2 (α − 1))
    height: f64,
    lgamma_am1: f64,
    lgamma_a: f64,
}

impl LatentDensity {
    pub fn new(params: &MixtureParams) -> Self {
        let comps = (0..params.k())
            .filter(|&k| params.p[k] > 0.0)
            .map(|k| {
                let (p, alpha, beta) = (params.p[k], params.alpha[k], params.beta[k]);
                Component {
                    p,
                    alpha,
                    beta,
                    height: p * beta / (2.0 * (alpha - 1.0)),
                    lgamma_am1: ln_gamma(alpha - 1.0),
                    lgamma_a: ln_gamma(alpha),
                }
            })
            .collect();
        Self { comps }
    }

    /// `f(x)`.
    pub fn pdf(&self, x: f64) -> f64 {
        let ax = x.abs();
        self.comps
            .iter()
            .map(|c| {
                let q = gamma_pq_with_lgamma(c.alpha - 1.0, c.beta * ax, c.lgamma_am1)
                    .map(|(_, q)| q)
                    .unwrap_or(0.0);
                c.height * q
            })
            .sum()
    }

    /// Adds `f(x)` to `out` for nonnegative, increasing `xs`.
    ///
    /// Along the grid `Q(a, y)` is advanced by subtracting a three-point Gauss–Legendre
    /// integral of the Gamma density over each short step, re-anchored to the exact
    /// value every few steps; evaluation stops once the tail is negligible.
    pub fn accumulate_sorted(&self, xs: &[f64], out: &mut [f64]) {
        const ANCHOR_EVERY: usize = 32;
        // 3-point rule on [0, 1]
        const G: [f64; 3] = [0.112_701_665_379_258_3, 0.5, 0.887_298_334_620_741_7];
        const W: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];
        for c in &self.comps {
            let a = c.alpha - 1.0;
            let density = |t: f64| ((a - 1.0) * t.ln() - t - c.lgamma_am1).exp();
            let max_step = 0.1 * a.sqrt().max(1.0);
            let cutoff = a + 20.0 * a.sqrt() + 60.0;
            let mut prev = f64::NAN;
            let mut q = 1.0;
            let mut since_anchor = ANCHOR_EVERY;
            for (x, o) in xs.iter().zip(out.iter_mut()) {
                let y = c.beta * x;
                if y > cutoff {
                    break;
                }
                let step = y - prev;
                if since_anchor >= ANCHOR_EVERY || !(step <= max_step) || prev < 1.0 {
                    q = gamma_pq_with_lgamma(a, y, c.lgamma_am1).map(|(_, q)| q).unwrap_or(0.0);
                    since_anchor = 0;
                } else if step > 0.0 {
                    q -= step * (0..3).map(|i| W[i] * density(prev + G[i] * step)).sum::<f64>();
                    q = q.max(0.0);
                    since_anchor += 1;
                }
                prev = y;
                *o += c.height * q;
            }
        }
    }

    /// `P(X > x)` for `x ≥ 0`: `½ [Q(α, βx) − βx Q(α−1, βx) / (α−1)]` per component.
    fn upper_tail(&self, x: f64) -> f64 {
        self.comps
            .iter()
            .map(|c| {
                let y = c.beta * x;
                let qa = gamma_pq_with_lgamma(c.alpha, y, c.lgamma_a).map(|(_, q)| q).unwrap_or(0.0);
                let qam1 = gamma_pq_with_lgamma(c.alpha - 1.0, y, c.lgamma_am1)
                    .map(|(_, q)| q)
                    .unwrap_or(0.0);
                c.p * 0.5 * (qa - y * qam1 / (c.alpha - 1.0)).max(0.0)
            })
            .sum::<f64>()
            .clamp(0.0, 0.5)
    }

    /// `F(x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x >= 0.0 {
            1.0 - self.upper_tail(x)
        } else {
            self.upper_tail(-x)
        }
    }

    /// A half-width `L` with `P(|X| > L) < tol`.
    pub fn support_bound(&self, tol: f64) -> f64 {
        let mut l = self
            .comps
            .iter()
            .map(|c| c.alpha / c.beta)
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        while 2.0 * self.upper_tail(l) > tol && l < 1e300 {
            l *= 2.0;
        }
        l
    }
}

impl Density for LatentDensity {
    fn pdf(&self, x: f64) -> f64 {
        LatentDensity::pdf(self, x)
    }

    fn cdf(&self, x: f64) -> f64 {
        LatentDensity::cdf(self, x)
    }

    fn support(&self) -> (f64, f64) {
        let l = self.support_bound(1e-12);
        (-l, l)
    }
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("evaluation point {x} is not finite")))
    }
}

/// Latent density `f(x)` of a single parameter draw.
pub fn eval_latent_density(params: &MixtureParams, x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(LatentDensity::new(params).pdf(x))
}

/// Latent CDF `F(x)` of a single parameter draw.
pub fn eval_latent_cdf(params: &MixtureParams, x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(LatentDensity::new(params).cdf(x))
}

/// Density of `W = X + U` at `w` where `U` has family `kernel` and standard deviation `sigma`.
pub fn eval_observed_density(params: &MixtureParams, kernel: ErrorKernel, sigma: f64, w: f64) -> Result<f64> {
    check_finite(w)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::usage(format!("noise scale must be positive, got {sigma}")));
    }
    let latent = LatentDensity::new(params);
    let bound = latent.support_bound(1e-14);
    let half = kernel.effective_halfwidth() * sigma;
    let lo = (w - half).max(-bound);
    let hi = (w + half).min(bound);
    if lo >= hi {
        return Ok(0.0);
    }
    let integrand = |x: f64| kernel.pdf(w - x, sigma) * latent.pdf(x);
    let peak = latent.pdf(0.0).max(kernel.pdf(0.0, sigma));
    quadrature::adaptive_with_breaks(&integrand, lo, hi, &[0.0, w], 1e-11 * peak.max(1.0))
}

/// Grid plus density values; the functional form of an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    x: Vec<f64>,
    values: Vec<f64>,
    // cumulative trapezoid integral at each grid point
    cumulative: Vec<f64>,
}

impl DensityEstimate {
    pub fn new(x: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_grid(&x)?;
        if values.len() != x.len() {
            return Err(Error::usage("density values and grid differ in length"));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::usage(format!("density value {v} is not a finite nonnegative number")));
        }
        let mut cumulative = Vec::with_capacity(x.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for i in 1..x.len() {
            acc += 0.5 * (x[i] - x[i - 1]) * (values[i] + values[i - 1]);
            cumulative.push(acc);
        }
        Ok(Self { x, values, cumulative })
    }

    pub fn grid(&self) -> &[f64] {
        &self.x
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Trapezoid integral over the grid.
    pub fn mass(&self) -> f64 {
        *self.cumulative.last().expect("grid is nonempty")
    }

    /// Same grid, values rescaled to unit trapezoid mass.
    pub fn normalized(&self) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(Error::numeric("cannot normalize a density with zero mass"));
        }
        DensityEstimate::new(self.x.clone(), self.values.iter().map(|v| v / m).collect())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,density")?;
        for (x, v) in self.x.iter().zip(&self.values) {
            writeln!(out, "{},{}", fmt_num(*x), fmt_num(*v))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_error)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x", "density"] {
            return Err(Error::Parse("density CSV must have header x,density".into()));
        }
        let mut x = Vec::new();
        let mut v = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            x.push(parse_field(&rec, 0, line)?);
            v.push(parse_field(&rec, 1, line)?);
        }
        DensityEstimate::new(x, v).map_err(|e| Error::Parse(e.to_string()))
    }

    fn cell(&self, x: f64) -> Option<usize> {
        let n = self.x.len();
        if n < 2 || x < self.x[0] || x > self.x[n - 1] {
            return None;
        }
        let i = self.x.partition_point(|g| *g <= x);
        Some(i.clamp(1, n - 1) - 1)
    }
}

impl Density for DensityEstimate {
    /// Linear interpolation of the normalized values; zero off the grid.
    fn pdf(&self, x: f64) -> f64 {
        let m = self.mass();
        match self.cell(x) {
            Some(i) => {
                let (x0, x1) = (self.x[i], self.x[i + 1]);
                let s = (x - x0) / (x1 - x0);
                ((1.0 - s) * self.values[i] + s * self.values[i + 1]) / m
            }
            None if self.x.len() == 1 && x == self.x[0] => f64::INFINITY,
            None => 0.0,
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x < self.x[0] {
            return 0.0;
        }
        if x >= self.x[n - 1] {
            return 1.0;
        }
        let i = self.cell(x).expect("x inside grid");
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let (f0, f1) = (self.values[i], self.values[i + 1]);
        let d = x - x0;
        let slope = (f1 - f0) / (x1 - x0);
        ((self.cumulative[i] + f0 * d + 0.5 * slope * d * d) / self.mass()).clamp(0.0, 1.0)
    }

    fn quantile(&self, u: f64) -> f64 {
        let target = u.clamp(0.0, 1.0) * self.mass();
        let n = self.x.len();
        let j = self.cumulative.partition_point(|c| *c < target);
        if j == 0 {
            return self.x[0];
        }
        if j >= n {
            return self.x[n - 1];
        }
        let i = j - 1;
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let (f0, f1) = (self.values[i], self.values[i + 1]);
        let h = x1 - x0;
        let need = target - self.cumulative[i];
        let slope = (f1 - f0) / h;
        // solve f0 d + slope d² / 2 = need on [0, h]
        let denom = f0 + (f0 * f0 + 2.0 * slope * need).max(0.0).sqrt();
        let d = if denom > 0.0 { 2.0 * need / denom } else { 0.0 };
        x0 + d.clamp(0.0, h)
    }

    fn support(&self) -> (f64, f64) {
        (self.x[0], *self.x.last().expect("grid is nonempty"))
    }
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::usage("evaluation grid is empty"));
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::usage("evaluation grid contains non-finite points"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::usage("evaluation grid must be strictly increasing"));
    }
    Ok(())
}

/// Equispaced grid of `n` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n).map(|i| if i == n - 1 { hi } else { lo + step * i as f64 }).collect()
        }
    }
}

/// Pointwise mean of the latent density over all draws.
pub fn posterior_mean_density(draws: &PosteriorDraws, grid: &[f64]) -> Result<DensityEstimate> {
    posterior_mean_values(&draws.draws, grid).and_then(|v| DensityEstimate::new(grid.to_vec(), v))
}

/// Pointwise mean of the latent density over a slice of parameter draws.
pub fn posterior_mean_values(draws: &[MixtureParams], grid: &[f64]) -> Result<Vec<f64>> {
    if draws.is_empty() {
        return Err(Error::usage("posterior mean needs at least one draw"));
    }
    check_grid(grid)?;
    // evaluate once per distinct |x|, in increasing order
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&i, &j| grid[i].abs().total_cmp(&grid[j].abs()));
    let mut abs_x: Vec<f64> = Vec::with_capacity(grid.len());
    let mut slot = vec![0usize; grid.len()];
    for &i in &order {
        let a = grid[i].abs();
        if abs_x.last() != Some(&a) {
            abs_x.push(a);
        }
        slot[i] = abs_x.len() - 1;
    }
    // fixed chunking keeps the summation order independent of the thread count
    let partial: Vec<Vec<f64>> = draws
        .par_chunks(32)
        .map(|chunk| {
            let mut acc = vec![0.0; abs_x.len()];
            for d in chunk {
                LatentDensity::new(d).accumulate_sorted(&abs_x, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; abs_x.len()];
    for acc in &partial {
        for (t, a) in total.iter_mut().zip(acc) {
            *t += a;
        }
    }
    let scale = 1.0 / draws.len() as f64;
    Ok(slot.iter().map(|&s| total[s] * scale).collect())
}

/// Functional posterior-mean density: exact pdf and CDF averaged over draws.
#[derive(Debug, Clone)]
pub struct PosteriorMeanDensity {
    dens: Vec<LatentDensity>,
}

impl PosteriorMeanDensity {
    pub fn new(draws: &[MixtureParams]) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::usage("posterior mean needs at least one draw"));
        }
        Ok(Self { dens: draws.iter().map(LatentDensity::new).collect() })
    }
}

impl Density for PosteriorMeanDensity {
    fn pdf(&self, x: f64) -> f64 {
        self.dens.iter().map(|d| d.pdf(x)).sum::<f64>() / self.dens.len() as f64
    }

    fn cdf(&self, x: f64) -> f64 {
        self.dens.iter().map(|d| d.cdf(x)).sum::<f64>() / self.dens.len() as f64
    }

    fn support(&self) -> (f64, f64) {
        let l = self.dens.iter().map(|d| d.support_bound(1e-12)).fold(0.0, f64::max);
        (-l, l)
    }
}
