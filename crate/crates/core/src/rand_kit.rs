//! Seedable random streams and the truncated / multivariate samplers used by the chain.
//!
//! Stream layout: an [`RngStream`] is a ChaCha8 generator keyed by a 64-bit seed
//! with a 64-bit stream id selecting an independent keystream. Sub-streams
//! (per site block, per replicate) are derived by mixing `(seed, stream)` into a
//! fresh seed and using the child index as the stream id.
//!
//! Chains use stream ids `0, 1, …` (one per chain); simulated data sets use
//! [`DATA_STREAM`]` + replicate`, so a fit and the data it was simulated from
//! never share a keystream.

use rand::distr::Open01;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::special::{
    gamma_pq, inv_gamma_p, inv_gamma_q, ln_gamma, ln_gamma_q, norm_cdf, norm_isf, norm_quantile,
    norm_sf,
};

/// First stream id reserved for simulated data.
pub const DATA_STREAM: u64 = 1 << 32;

/// Smallest interval mass the inverse-CDF samplers accept.
pub const MIN_TRUNCATION_MASS: f64 = 1e-300;

/// Deterministic random stream identified by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream; identical `(self, id)` always yields the same child.
    pub fn substream(&self, id: u64) -> RngStream {
        let mixed = splitmix64(splitmix64(self.seed) ^ self.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        RngStream::new(mixed, id)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[inline]
fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(Open01)
}

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::usage(format!("truncation interval [{lo}, {hi}] is empty")));
    }
    Ok(())
}

/// `N(mu, sigma²)` conditioned on `[lo, hi]`, by inverse CDF.
///
/// The side of the distribution holding the interval decides whether the
/// lower or upper tail function is inverted, so intervals deep in a tail keep
/// full relative precision down to a mass of [`MIN_TRUNCATION_MASS`].
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mu: f64,
    sigma: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    check_interval(lo, hi)?;
    if !(sigma > 0.0 && sigma.is_finite()) || !mu.is_finite() {
        return Err(Error::usage(format!("invalid normal parameters mu={mu}, sigma={sigma}")));
    }
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    let z = if a >= 0.0 {
        upper_tail_normal(a, b, rng)?
    } else if b <= 0.0 {
        -upper_tail_normal(-b, -a, rng)?
    } else {
        let (fa, fb) = (norm_cdf(a), norm_cdf(b));
        let mass = fb - fa;
        if !(mass >= MIN_TRUNCATION_MASS) {
            return Err(truncation_mass_error("normal", lo, hi, mass));
        }
        norm_quantile(fa + open01(rng) * mass)
    };
    Ok((mu + sigma * z).clamp(lo, hi))
}

// standard normal restricted to [a, b] with 0 <= a
fn upper_tail_normal<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let (sa, sb) = (norm_sf(a), norm_sf(b));
    let mass = sa - sb;
    if !(mass >= MIN_TRUNCATION_MASS) {
        return Err(truncation_mass_error("normal", a, b, mass));
    }
    Ok(norm_isf(sb + open01(rng) * mass).clamp(a, b))
}

fn truncation_mass_error(family: &str, lo: f64, hi: f64, mass: f64) -> Error {
    Error::numeric(format!(
        "{family} truncation to [{lo}, {hi}] has mass {mass:.3e} below {MIN_TRUNCATION_MASS:e}"
    ))
}

/// `Laplace(mu, b)` conditioned on `[lo, hi]`, by inverting the piecewise-exponential CDF.
pub fn sample_truncated_laplace<R: Rng + ?Sized>(
    mu: f64,
    b: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    check_interval(lo, hi)?;
    if !(b > 0.0 && b.is_finite()) || !mu.is_finite() {
        return Err(Error::usage(format!("invalid Laplace parameters mu={mu}, b={b}")));
    }
    let a = (lo - mu) / b;
    let c = (hi - mu) / b;
    let z = if a >= 0.0 {
        laplace_one_side(a, c, rng, lo, hi)?
    } else if c <= 0.0 {
        -laplace_one_side(-c, -a, rng, lo, hi)?
    } else {
        // straddles the center: F(z) = e^z / 2 below zero, 1 - e^{-z} / 2 above
        let fa = 0.5 * a.exp();
        let fc = 1.0 - 0.5 * (-c).exp();
        let u = fa + open01(rng) * (fc - fa);
        if u < 0.5 {
            (2.0 * u).ln()
        } else {
            -(2.0 * (1.0 - u)).ln()
        }
    };
    Ok((mu + b * z).clamp(lo, hi))
}

// standard Laplace on [a, c] with 0 <= a: a plus a truncated unit exponential
fn laplace_one_side<R: Rng + ?Sized>(a: f64, c: f64, rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
    let width = c - a;
    let log_mass = 0.5f64.ln() - a + (-(-width).exp_m1()).ln();
    if log_mass < MIN_TRUNCATION_MASS.ln() {
        return Err(truncation_mass_error("Laplace", lo, hi, log_mass.exp()));
    }
    Ok(a + truncated_unit_exponential(width, rng))
}

// Exp(1) restricted to [0, width]
fn truncated_unit_exponential<R: Rng + ?Sized>(width: f64, rng: &mut R) -> f64 {
    let u = open01(rng);
    if width.is_infinite() {
        -(-u).ln_1p()
    } else {
        (-(u * (-width).exp_m1()).ln_1p()).min(width)
    }
}

/// `Expon(rate)` restricted to `[lo, hi]`; for `hi = ∞` this is `lo + Exp(rate)`.
pub fn sample_truncated_exponential<R: Rng + ?Sized>(
    rate: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    check_interval(lo, hi)?;
    if !(rate > 0.0 && rate.is_finite()) || !lo.is_finite() {
        return Err(Error::usage(format!("invalid exponential parameters rate={rate}, lo={lo}")));
    }
    Ok((lo + truncated_unit_exponential(rate * (hi - lo), rng) / rate).clamp(lo, hi))
}

/// `Ga(shape, rate)` restricted to `[lo, hi]`.
///
/// Upper tails (`hi = ∞`) use exact rejection: plain Gamma draws while `lo` sits
/// below one standard deviation past the mean, and a shifted-exponential proposal
/// tangent to the log-density at `lo` beyond that. Bounded intervals and shapes
/// below one fall back to inverting the regularized incomplete gamma.
pub fn sample_truncated_gamma<R: Rng + ?Sized>(
    shape: f64,
    rate: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    check_interval(lo, hi)?;
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::usage(format!("invalid gamma parameters shape={shape}, rate={rate}")));
    }
    if !(lo >= 0.0) || !lo.is_finite() {
        return Err(Error::usage(format!("gamma truncation needs finite lo >= 0, got {lo}")));
    }
    let ylo = rate * lo;
    if hi.is_infinite() {
        if ylo > 600.0 {
            let log_mass = ln_gamma_q(shape, ylo)?;
            if log_mass < MIN_TRUNCATION_MASS.ln() {
                return Err(truncation_mass_error("gamma", lo, hi, log_mass.exp()));
            }
        }
        return sample_gamma_upper_tail(shape, rate, lo, rng);
    }
    let y = inverse_cdf_gamma(shape, ylo, rate * hi, rng).map_err(|e| match e {
        Error::Numeric(_) => truncation_mass_error("gamma", lo, hi, 0.0),
        other => other,
    })?;
    Ok((y / rate).clamp(lo, hi))
}

/// `Ga(shape, rate)` restricted to `[lo, ∞)` by exact rejection, without the
/// tail-mass check, so tails whose mass underflows still get correct draws.
pub fn sample_gamma_upper_tail<R: Rng + ?Sized>(shape: f64, rate: f64, lo: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::usage(format!("invalid gamma parameters shape={shape}, rate={rate}")));
    }
    if !(lo >= 0.0) || !lo.is_finite() {
        return Err(Error::usage(format!("gamma truncation needs finite lo >= 0, got {lo}")));
    }
    Ok((standard_gamma_tail(shape, rate * lo, rng)? / rate).max(lo))
}

// Ga(shape, 1) conditioned on (lo, ∞)
fn standard_gamma_tail<R: Rng + ?Sized>(shape: f64, lo: f64, rng: &mut R) -> Result<f64> {
    let plain = Gamma::new(shape, 1.0).map_err(|e| Error::usage(e.to_string()))?;
    if lo <= 0.0 {
        return Ok(plain.sample(rng));
    }
    if shape >= 1.0 {
        if lo <= shape + shape.sqrt() {
            // acceptance is P(X > lo) >= P(X > mean + sd), at least ~0.13
            loop {
                let x = plain.sample(rng);
                if x > lo {
                    return Ok(x);
                }
            }
        }
        // log-concave: the tangent line at lo bounds the log-density from above
        let rate = 1.0 - (shape - 1.0) / lo;
        loop {
            let d = -open01(rng).ln() / rate;
            let r = d / lo;
            let log_accept = (shape - 1.0) * (r.ln_1p() - r);
            if open01(rng).ln() <= log_accept {
                return Ok(lo + d);
            }
        }
    }
    if lo >= 1.0 {
        // x^{shape-1} is decreasing: propose lo + Exp(1), accept with (x / lo)^{shape-1}
        loop {
            let d = -open01(rng).ln();
            if open01(rng).ln() <= (shape - 1.0) * (d / lo).ln_1p() {
                return Ok(lo + d);
            }
        }
    }
    inverse_cdf_gamma(shape, lo, f64::INFINITY, rng)
}

// Ga(shape, 1) on [lo, hi] by inverting P or Q, whichever side is better conditioned
fn inverse_cdf_gamma<R: Rng + ?Sized>(shape: f64, lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    let (plo, qlo) = gamma_pq(shape, lo)?;
    let (phi, qhi) = gamma_pq(shape, hi)?;
    let y = if lo >= shape {
        let mass = qlo - qhi;
        if !(mass >= MIN_TRUNCATION_MASS) {
            return Err(Error::numeric("gamma truncation mass underflow"));
        }
        inv_gamma_q(shape, (qhi + open01(rng) * mass).min(qlo))?
    } else {
        let mass = phi - plo;
        if !(mass >= MIN_TRUNCATION_MASS) {
            return Err(Error::numeric("gamma truncation mass underflow"));
        }
        let u = (plo + open01(rng) * mass).min(phi);
        if u >= 1.0 {
            return Ok(lo.max(shape));
        }
        inv_gamma_p(shape, u)?
    };
    Ok(y.clamp(lo, hi))
}

/// Draw from `Dirichlet(conc)`.
///
/// Gamma variates are formed in log space (`Ga(c) = Ga(c + 1) · U^{1/c}`), so
/// tiny concentrations do not underflow the normalization.
pub fn sample_dirichlet<R: Rng + ?Sized>(conc: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if conc.is_empty() {
        return Err(Error::usage("Dirichlet needs at least one concentration"));
    }
    if let Some(c) = conc.iter().find(|&&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::usage(format!("Dirichlet concentration must be positive, got {c}")));
    }
    let mut logs = Vec::with_capacity(conc.len());
    for &c in conc {
        let lg = if c >= 1.0 {
            Gamma::new(c, 1.0).map_err(|e| Error::usage(e.to_string()))?.sample(rng).ln()
        } else {
            let g = Gamma::new(c + 1.0, 1.0).map_err(|e| Error::usage(e.to_string()))?;
            g.sample(rng).ln() + open01(rng).ln() / c
        };
        logs.push(lg);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// Index drawn with probability proportional to `exp(logw[k])`.
pub fn sample_categorical_log<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> Result<usize> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::usage(
            "categorical weights need at least one finite log-weight".to_string(),
        ));
    }
    let total: f64 = logw.iter().map(|l| (l - max).exp()).sum();
    let mut u = open01(rng) * total;
    let mut last = 0;
    for (k, l) in logw.iter().enumerate() {
        let w = (l - max).exp();
        if w > 0.0 {
            last = k;
            if u < w {
                return Ok(k);
            }
            u -= w;
        }
    }
    Ok(last)
}

/// One standard normal draw.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Log-density of `Ga(shape, rate)` at `x`.
pub fn gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() + (shape - 1.0) * x.ln() - rate * x - ln_gamma(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_streams_agree() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let mut c = RngStream::new(7, 4);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        let s1: Vec<u64> = {
            let mut s = a.substream(2);
            (0..4).map(|_| s.next_u64()).collect()
        };
        let s2: Vec<u64> = {
            let mut s = RngStream::new(7, 3).substream(2);
            (0..4).map(|_| s.next_u64()).collect()
        };
        assert_eq!(s1, s2);
    }

    #[test]
    fn empty_intervals_are_usage_errors() {
        let mut rng = RngStream::new(1, 0);
        assert!(matches!(sample_truncated_normal(0.0, 1.0, 1.0, 1.0, &mut rng), Err(Error::Usage(_))));
        assert!(matches!(sample_truncated_laplace(0.0, 1.0, 2.0, 1.0, &mut rng), Err(Error::Usage(_))));
        assert!(matches!(sample_truncated_exponential(1.0, 2.0, 1.0, &mut rng), Err(Error::Usage(_))));
        assert!(matches!(sample_truncated_gamma(2.0, 1.0, 3.0, 3.0, &mut rng), Err(Error::Usage(_))));
        assert!(matches!(sample_dirichlet(&[1.0, 0.0], &mut rng), Err(Error::Usage(_))));
        assert!(matches!(
            sample_categorical_log(&[f64::NEG_INFINITY, f64::NEG_INFINITY], &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn vanishing_mass_is_a_numeric_error() {
        let mut rng = RngStream::new(1, 0);
        let err = sample_truncated_normal(0.0, 1.0, 40.0, 41.0, &mut rng).unwrap_err();
        assert!(err.is_numeric());
        let err = sample_truncated_laplace(0.0, 1.0, 800.0, f64::INFINITY, &mut rng).unwrap_err();
        assert!(err.is_numeric());
        let err = sample_truncated_gamma(2.0, 1.0, 900.0, f64::INFINITY, &mut rng).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn upper_tail_beyond_underflow() {
        // excess over lo is close to Exp(1 − (a − 1)/lo) this far out
        let mut rng = RngStream::new(4, 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let y = sample_gamma_upper_tail(3.0, 1.0, 5000.0, &mut rng).unwrap();
            assert!(y >= 5000.0);
            sum += y - 5000.0;
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0 / (1.0 - 2.0 / 5000.0)).abs() < 4.0 / (n as f64).sqrt(), "{mean}");
        assert!(sample_gamma_upper_tail(3.0, 1.0, f64::INFINITY, &mut rng).is_err());
    }

    #[test]
    fn far_tails_stay_in_support() {
        let mut rng = RngStream::new(9, 0);
        for _ in 0..1000 {
            let x = sample_truncated_normal(0.0, 1.0, 30.0, f64::INFINITY, &mut rng).unwrap();
            assert!((30.0..31.0).contains(&x));
            let x = sample_truncated_normal(5.0, 0.5, -1.0, -0.5, &mut rng).unwrap();
            assert!((-1.0..=-0.5).contains(&x));
            let y = sample_truncated_gamma(1.5, 1.0, 400.0, f64::INFINITY, &mut rng).unwrap();
            assert!((400.0..430.0).contains(&y));
            let y = sample_truncated_gamma(0.4, 2.0, 3.0, f64::INFINITY, &mut rng).unwrap();
            assert!(y >= 3.0);
            let y = sample_truncated_gamma(0.4, 2.0, 0.01, 0.02, &mut rng).unwrap();
            assert!((0.01..=0.02).contains(&y));
        }
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..1000 {
            assert_eq!(sample_categorical_log(&[0.0, f64::NEG_INFINITY], &mut rng).unwrap(), 0);
            assert_ne!(sample_categorical_log(&[-700.0, f64::NEG_INFINITY, 0.0], &mut rng).unwrap(), 1);
        }
    }
}
