//! Kernel baselines: the naive estimator that ignores noise and the
//! deconvoluting-kernel estimator for homoscedastic or heteroscedastic noise.
//!
//! The deconvoluting estimator inverts
//! `f̂(x) = (1/π) ∫₀^{1/h} φ_K(th) Re[e^{-itx} φ̂_W(t)] / φ_U(t) dt`
//! with `φ_K(s) = (1 − s²)³` on `[-1, 1]` and `φ̂_W` the empirical characteristic
//! function. In heteroscedastic mode `φ_U` is the average of the per-observation
//! noise characteristic functions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_grid, Dataset, DensityEstimate, ErrorKernel};
use crate::quadrature::{trapezoid, GaussLegendre};
use crate::special::norm_pdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    /// Fourier transform `(1 − s²)³` on `[-1, 1]`.
    FourierCompact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    Plugin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    /// Gaussian kernel, Silverman bandwidth.
    pub fn naive() -> Self {
        Self { family: KernelFamily::Gaussian, bandwidth: Bandwidth::Plugin }
    }

    /// Compact-Fourier kernel, AMISE plug-in bandwidth.
    pub fn decon() -> Self {
        Self { family: KernelFamily::FourierCompact, bandwidth: Bandwidth::Plugin }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Homo,
    Hetero,
}

/// A kernel estimate on the reporting grid.
#[derive(Debug, Clone)]
pub struct KernelEstimate {
    /// Clipped at zero and normalized to unit trapezoid mass.
    pub estimate: DensityEstimate,
    pub bandwidth: f64,
    /// Trapezoid mass of the raw (unclipped) values.
    pub pre_clip_mass: f64,
}

/// Kernel Fourier transform.
pub fn fourier_compact_ft(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - s * s).powi(3)
    }
}

/// Spatial form `K(x) = (1/π) ∫₀¹ (1 − s²)³ cos(sx) ds`.
pub fn fourier_compact_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 2.0 {
        // Taylor series; moment ∫ s^{2k}(1−s²)³ ds = Σ_j C(3,j)(−1)^j / (2k+2j+1)
        let x2 = x * x;
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 0..30 {
            let kk = 2 * k;
            let moment = 1.0 / (kk + 1) as f64 - 3.0 / (kk + 3) as f64 + 3.0 / (kk + 5) as f64 - 1.0 / (kk + 7) as f64;
            sum += term * moment;
            term *= -x2 / ((kk + 1) * (kk + 2)) as f64;
            if term.abs() < 1e-18 {
                break;
            }
        }
        return sum / PI;
    }
    let (s, c) = x.sin_cos();
    let x2 = x * x;
    48.0 * c / (PI * x2 * x2) * (1.0 - 15.0 / x2) - 144.0 * s / (PI * x2 * x2 * x) * (2.0 - 5.0 / x2)
}

const MU2: f64 = 6.0;

fn quartiles(sorted: &[f64]) -> (f64, f64) {
    let q = |p: f64| {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    (q(0.25), q(0.75))
}

fn sorted_w(data: &Dataset) -> Vec<f64> {
    let mut w = data.w().to_vec();
    w.sort_by(f64::total_cmp);
    w
}

fn sample_sd(xs: &[f64]) -> f64 {
    crate::diagnostics::mean_var(xs).1.sqrt()
}

/// `0.9·min(sd, IQR/1.34)·n^{-1/5}`, or a small scale-aware width for degenerate samples.
pub fn silverman_bandwidth(w: &[f64]) -> f64 {
    let mut s = w.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let (q1, q3) = quartiles(&s);
    let sd = sample_sd(&s);
    let iqr = (q3 - q1) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        let centre = s.iter().map(|v| v.abs()).sum::<f64>() / n;
        0.1 * centre.max(1.0) * n.powf(-0.2)
    }
}

fn finish(grid: &[f64], raw: Vec<f64>, bandwidth: f64) -> Result<KernelEstimate> {
    let pre_clip_mass = trapezoid(grid, &raw);
    let clipped: Vec<f64> = raw.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
    let estimate = DensityEstimate::new(grid.to_vec(), clipped)?.normalized()?;
    Ok(KernelEstimate { estimate, bandwidth, pre_clip_mass })
}

/// Kernel estimate on `W` that ignores the noise.
pub fn naive_kde(data: &Dataset, spec: &KernelSpec, grid: &[f64]) -> Result<KernelEstimate> {
    check_grid(grid)?;
    if data.len() < 2 {
        return Err(Error::usage("naive KDE needs at least two observations"));
    }
    match spec.family {
        KernelFamily::Gaussian => {
            let h = match spec.bandwidth {
                Bandwidth::Fixed(h) => checked_bandwidth(h)?,
                Bandwidth::Plugin => silverman_bandwidth(data.w()),
            };
            let w = sorted_w(data);
            let norm = 1.0 / (w.len() as f64 * h);
            let raw = grid
                .iter()
                .map(|&x| {
                    let lo = w.partition_point(|v| *v < x - 9.0 * h);
                    let hi = w.partition_point(|v| *v <= x + 9.0 * h);
                    norm * w[lo..hi].iter().map(|v| norm_pdf((x - v) / h)).sum::<f64>()
                })
                .collect();
            finish(grid, raw, h)
        }
        KernelFamily::FourierCompact => {
            let h = match spec.bandwidth {
                Bandwidth::Fixed(h) => checked_bandwidth(h)?,
                Bandwidth::Plugin => plugin_bandwidth(data, &|_| 1.0),
            };
            let raw = fourier_inversion(data.w(), &|_| 1.0, h, grid);
            finish(grid, raw, h)
        }
    }
}

fn checked_bandwidth(h: f64) -> Result<f64> {
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(Error::usage(format!("bandwidth must be positive, got {h}")))
    }
}

// At most this many noise scales enter the averaged characteristic function.
const CF_SUBSAMPLE: usize = 512;

/// Noise characteristic function used by the estimator.
fn noise_cf(data: &Dataset, kernel: ErrorKernel, mode: NoiseMode) -> impl Fn(f64) -> f64 {
    let scales: Vec<f64> = match mode {
        NoiseMode::Homo => vec![data.median_sigma()],
        NoiseMode::Hetero => {
            let mut s = data.sigma().to_vec();
            s.sort_by(f64::total_cmp);
            if s.len() > CF_SUBSAMPLE {
                // evenly spaced order statistics
                (0..CF_SUBSAMPLE)
                    .map(|i| s[((i as f64 + 0.5) * s.len() as f64 / CF_SUBSAMPLE as f64) as usize])
                    .collect()
            } else {
                s
            }
        }
    };
    move |t: f64| scales.iter().map(|&sd| kernel.char_fn(t, sd)).sum::<f64>() / scales.len() as f64
}

/// Deconvoluting kernel estimate.
pub fn decon_kde(
    data: &Dataset,
    kernel: ErrorKernel,
    spec: &KernelSpec,
    mode: NoiseMode,
    grid: &[f64],
) -> Result<KernelEstimate> {
    check_grid(grid)?;
    if data.len() < 2 {
        return Err(Error::usage("deconvoluting KDE needs at least two observations"));
    }
    if spec.family != KernelFamily::FourierCompact {
        return Err(Error::usage("the deconvoluting estimator needs a kernel with compactly supported Fourier transform"));
    }
    let cf = noise_cf(data, kernel, mode);
    let h = match spec.bandwidth {
        Bandwidth::Fixed(h) => checked_bandwidth(h)?,
        Bandwidth::Plugin => plugin_bandwidth(data, &cf),
    };
    let raw = fourier_inversion(data.w(), &cf, h, grid);
    finish(grid, raw, h)
}

/// Evaluates `(1/π) ∫₀^{1/h} φ_K(th) [C(t) cos(tx) + S(t) sin(tx)] / φ_U(t) dt` on the grid,
/// where `C`, `S` are the empirical cosine and sine transforms of `w`.
pub fn fourier_inversion(w: &[f64], cf_u: &dyn Fn(f64) -> f64, h: f64, grid: &[f64]) -> Vec<f64> {
    let n = w.len() as f64;
    let reach = w.iter().chain(grid).fold(0.0f64, |m, v| m.max(v.abs()));
    // enough nodes to resolve the fastest oscillation e^{it(w − x)} on [0, 1/h]
    let nodes = ((2.0 * reach / h).ceil() as usize + 64).min(20_000);
    let rule = GaussLegendre::new(nodes);
    // (t, weighted C(t), weighted S(t))
    let band: Vec<(f64, f64, f64)> = rule
        .mapped(0.0, 1.0 / h)
        .map(|(t, wt)| {
            let (mut c, mut s) = (0.0, 0.0);
            for v in w {
                let (sn, cs) = (t * v).sin_cos();
                c += cs;
                s += sn;
            }
            let weight = wt * fourier_compact_ft(t * h) / cf_u(t) / (PI * n);
            (t, c * weight, s * weight)
        })
        .collect();
    grid.iter()
        .map(|&x| {
            band.iter()
                .map(|(t, c, s)| {
                    let (sn, cs) = (t * x).sin_cos();
                    c * cs + s * sn
                })
                .sum()
        })
        .collect()
}

/// `R(f'') = 3 / (8 √π s⁵)` for a normal density with standard deviation `s`.
fn normal_reference_curvature(s: f64) -> f64 {
    3.0 / (8.0 * PI.sqrt() * s.powi(5))
}

/// Latent scale from `var(W) − mean(σ²)`, floored at a twentieth of `var(W)`.
fn latent_sd(data: &Dataset) -> f64 {
    let var_w = crate::diagnostics::mean_var(data.w()).1;
    let noise = data.sigma().iter().map(|s| s * s).sum::<f64>() / data.len() as f64;
    (var_w - noise).max(0.05 * var_w).sqrt()
}

/// Asymptotic MISE of the deconvoluting estimator at bandwidth `h`:
/// `(1/(π n h)) ∫₀¹ (1 − s²)⁶ / φ_U(s/h)² ds + (h⁴/4) μ₂² R(f'')`.
pub fn amise(h: f64, n: usize, curvature: f64, cf_u: &dyn Fn(f64) -> f64) -> f64 {
    let rule = crate::quadrature::rule10();
    let mut var = 0.0;
    for p in 0..8 {
        let (a, b) = (p as f64 / 8.0, (p + 1) as f64 / 8.0);
        for (s, wt) in rule.mapped(a, b) {
            let cf = cf_u(s / h);
            var += wt * fourier_compact_ft(s).powi(2) / (cf * cf);
        }
    }
    var / (PI * n as f64 * h) + 0.25 * h.powi(4) * MU2 * MU2 * curvature
}

/// Minimizes [`amise`] over a log grid with a golden-section refinement; falls back
/// to a normal-reference rule when no finite minimum exists.
pub fn plugin_bandwidth(data: &Dataset, cf_u: &dyn Fn(f64) -> f64) -> f64 {
    let s = latent_sd(data);
    let n = data.len();
    let r = normal_reference_curvature(s);
    let f = |log_h: f64| amise(log_h.exp(), n, r, cf_u);
    let (lo, hi) = ((1e-3 * s).ln(), (5.0 * s).ln());
    let steps = 160;
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..=steps {
        let v = f(lo + (hi - lo) * i as f64 / steps as f64);
        if v < best.0 {
            best = (v, i);
        }
    }
    if !best.0.is_finite() {
        let h = 1.06 * s * (n as f64).powf(-0.2);
        log::warn!("plug-in bandwidth search failed; using normal-reference bandwidth {h}");
        return h;
    }
    let step = (hi - lo) / steps as f64;
    let centre = lo + step * best.1 as f64;
    let (mut a, mut b) = (centre - step, centre + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    (0.5 * (a + b)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{iae, Density, Normal};
    use crate::model::linspace;
    use crate::quadrature::adaptive;
    use crate::rand_kit::{standard_normal, RngStream};

    fn normal_data(n: usize, seed: u64, sigma: f64) -> Dataset {
        let mut rng = RngStream::new(seed, 0);
        let w = (0..n).map(|_| standard_normal(&mut rng)).collect();
        Dataset::new(w, vec![sigma; n]).unwrap()
    }

    #[test]
    fn compact_kernel_matches_its_fourier_integral() {
        for x in [0.0, 0.3, 1.9, 2.0, 2.1, 5.0, 17.0] {
            let direct = adaptive(&|s: f64| fourier_compact_ft(s) * (s * x).cos(), 0.0, 1.0, 1e-15).unwrap() / PI;
            assert!((fourier_compact_kernel(x) - direct).abs() < 1e-10, "{x}");
        }
        assert!((fourier_compact_kernel(0.0) - 16.0 / 35.0 / PI).abs() < 1e-15);
        let mass = 2.0 * adaptive(&fourier_compact_kernel, 0.0, 400.0, 1e-12).unwrap();
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }

    #[test]
    fn naive_kde_is_consistent() {
        let data = normal_data(100_000, 1, 1.0);
        let grid = linspace(-6.0, 6.0, 2401);
        let est = naive_kde(&data, &KernelSpec::naive(), &grid).unwrap();
        let err = iae(&est.estimate, &Normal { mean: 0.0, sd: 1.0 }, &grid).unwrap();
        assert!(err < 0.03, "{err}");
    }

    #[test]
    fn degenerate_sample_still_normalizes() {
        let data = Dataset::new(vec![0.5; 10], vec![1.0; 10]).unwrap();
        let grid = linspace(-10.0, 10.0, 4001);
        let est = naive_kde(&data, &KernelSpec::naive(), &grid).unwrap();
        assert!((est.pre_clip_mass - 1.0).abs() < 1e-6, "{}", est.pre_clip_mass);
        assert!((est.estimate.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mirrored_sample_gives_symmetric_estimates() {
        let half = normal_data(500, 2, 0.3);
        let w: Vec<f64> = half.w().iter().flat_map(|v| [*v, -*v]).collect();
        let data = Dataset::new(w, vec![0.3; 1000]).unwrap();
        let grid = linspace(-5.0, 5.0, 1001);
        let a = naive_kde(&data, &KernelSpec::naive(), &grid).unwrap();
        let b = decon_kde(&data, ErrorKernel::Normal, &KernelSpec::decon(), NoiseMode::Homo, &grid).unwrap();
        for est in [a.estimate, b.estimate] {
            let v = est.values();
            for i in 0..v.len() {
                assert!((v[i] - v[v.len() - 1 - i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_cf_matches_spatial_kernel_sum() {
        let data = normal_data(300, 3, 1.0);
        let h = 0.4;
        let grid = linspace(-4.0, 4.0, 81);
        let fourier = fourier_inversion(data.w(), &|_| 1.0, h, &grid);
        for (x, f) in grid.iter().zip(&fourier) {
            let spatial =
                data.w().iter().map(|w| fourier_compact_kernel((x - w) / h)).sum::<f64>() / (300.0 * h);
            assert!((f - spatial).abs() < 1e-9, "{x}: {f} vs {spatial}");
        }
        let spec = KernelSpec { family: KernelFamily::FourierCompact, bandwidth: Bandwidth::Fixed(h) };
        let naive = naive_kde(&data, &spec, &grid).unwrap();
        assert_eq!(naive.bandwidth, h);
    }

    #[test]
    fn zero_noise_decon_matches_naive() {
        let data = normal_data(10_000, 4, 1e-6);
        let grid = linspace(-6.0, 6.0, 1201);
        let spec = KernelSpec { family: KernelFamily::FourierCompact, bandwidth: Bandwidth::Plugin };
        let naive = naive_kde(&data, &spec, &grid).unwrap();
        let decon = decon_kde(&data, ErrorKernel::Normal, &KernelSpec::decon(), NoiseMode::Homo, &grid).unwrap();
        let d = iae(&naive.estimate, &decon.estimate, &grid).unwrap();
        assert!(d < 0.01, "{d}");
    }

    #[test]
    fn laplace_cf_at_zero_is_one() {
        let data = normal_data(50, 5, 0.7);
        let cf = noise_cf(&data, ErrorKernel::Laplace, NoiseMode::Homo);
        assert_eq!(cf(0.0), 1.0);
        let cf = noise_cf(&data, ErrorKernel::Laplace, NoiseMode::Hetero);
        assert_eq!(cf(0.0), 1.0);
        let b = ErrorKernel::Laplace.scale(0.7);
        assert!((cf(2.0) - 1.0 / (1.0 + 4.0 * b * b)).abs() < 1e-15);
    }

    #[test]
    fn deconvolution_recovers_a_normal_latent() {
        // X ~ N(0, 1), U ~ N(0, 0.5²)
        let mut rng = RngStream::new(6, 0);
        let n = 5000;
        let w = (0..n).map(|_| standard_normal(&mut rng) + 0.5 * standard_normal(&mut rng)).collect();
        let data = Dataset::new(w, vec![0.5; n]).unwrap();
        let grid = linspace(-6.0, 6.0, 1201);
        let truth = Normal { mean: 0.0, sd: 1.0 };
        let decon = decon_kde(&data, ErrorKernel::Normal, &KernelSpec::decon(), NoiseMode::Homo, &grid).unwrap();
        let naive = naive_kde(&data, &KernelSpec::naive(), &grid).unwrap();
        let (ed, en) = (iae(&decon.estimate, &truth, &grid).unwrap(), iae(&naive.estimate, &truth, &grid).unwrap());
        assert!(ed < en, "{ed} vs {en}");
        assert!(ed < 0.1, "{ed}");
        assert!((decon.estimate.cdf(0.0) - 0.5).abs() < 0.02);
    }

    #[test]
    fn bandwidth_rejects_nonsense() {
        let data = normal_data(10, 7, 1.0);
        let spec = KernelSpec { family: KernelFamily::Gaussian, bandwidth: Bandwidth::Fixed(-1.0) };
        assert!(naive_kde(&data, &spec, &[0.0, 1.0]).is_err());
        assert!(decon_kde(&data, ErrorKernel::Normal, &KernelSpec::naive(), NoiseMode::Homo, &[0.0, 1.0]).is_err());
    }
}
