//! Expected genome-wide discoveries at a hypothetical sample size.
//!
//! For effect `β` with residual SD `σ`, a two-sided test at level `α` with `n`
//! individuals has power `Φc(z_{α/2} − √n β/σ) + Φ(−z_{α/2} − √n β/σ)`. Summing
//! over SNPs for each posterior draw gives a posterior sample of the discovery
//! count. Thinning of the draws is the caller's job.

use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{csv_error, parse_field, PosteriorDraws};
use crate::special::{norm_cdf, norm_isf, norm_sf};

/// Fewer draws than this make the 95% interval unreliable.
pub const MIN_STABLE_DRAWS: usize = 40;

/// Posterior effect-size samples, one row per SNP, one column per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEffectMatrix {
    beta: Vec<f64>,
    sigma: Vec<f64>,
    n_draws: usize,
}

impl PosteriorEffectMatrix {
    /// `beta` is row-major `sigma.len() × n_draws`.
    pub fn new(beta: Vec<f64>, sigma: Vec<f64>, n_draws: usize) -> Result<Self> {
        if n_draws == 0 || sigma.is_empty() {
            return Err(Error::usage("effect matrix needs at least one SNP and one draw"));
        }
        if beta.len() != sigma.len() * n_draws {
            return Err(Error::usage(format!(
                "effect matrix has {} entries, expected {} SNPs × {n_draws} draws",
                beta.len(),
                sigma.len()
            )));
        }
        if let Some(b) = beta.iter().find(|b| !b.is_finite()) {
            return Err(Error::usage(format!("effect matrix contains {b}")));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::usage(format!("residual SDs must be positive, got {s}")));
        }
        Ok(Self { beta, sigma, n_draws })
    }

    /// Uses the latent `x` snapshots of a fit as effect draws.
    pub fn from_latent_draws(draws: &PosteriorDraws, sigma: Vec<f64>) -> Result<Self> {
        let n_draws = draws.latent_x.len();
        if n_draws == 0 {
            return Err(Error::usage("posterior draws carry no latent snapshots"));
        }
        let k = sigma.len();
        let mut beta = vec![0.0; k * n_draws];
        for (j, snap) in draws.latent_x.iter().enumerate() {
            if snap.len() != k {
                return Err(Error::usage("latent snapshot length differs from the number of SNPs"));
            }
            for (i, b) in snap.iter().enumerate() {
                beta[i * n_draws + j] = *b;
            }
        }
        Self::new(beta, sigma, n_draws)
    }

    /// Reads a headerless numeric CSV (one SNP per row) and a `sigma` column CSV.
    pub fn from_csv<R1: Read, R2: Read>(beta: R1, sigma: R2) -> Result<Self> {
        let mut rows = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(beta);
        let mut values = Vec::new();
        let mut width = None;
        for (line, rec) in rows.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            if *width.get_or_insert(rec.len()) != rec.len() {
                return Err(Error::Parse(format!("effect matrix row {} has {} columns", line + 1, rec.len())));
            }
            for c in 0..rec.len() {
                values.push(parse_field(&rec, c, line)?);
            }
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(sigma);
        let headers = rdr.headers().map_err(csv_error)?.clone();
        let col = headers
            .iter()
            .position(|h| h == "sigma")
            .ok_or_else(|| Error::Parse("sigma CSV needs a 'sigma' column".into()))?;
        let mut sigma = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            sigma.push(parse_field(&rec.map_err(csv_error)?, col, line)?);
        }
        let n_draws = width.unwrap_or(0);
        if values.len() != sigma.len() * n_draws {
            return Err(Error::Parse(format!(
                "effect matrix has {} rows but sigma has {}",
                values.len() / n_draws.max(1),
                sigma.len()
            )));
        }
        Self::new(values, sigma, n_draws).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn n_snps(&self) -> usize {
        self.sigma.len()
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn get(&self, snp: usize, draw: usize) -> f64 {
        self.beta[snp * self.n_draws + draw]
    }
}

fn check_level(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::usage(format!("significance level must lie in (0, 1), got {alpha}")))
    }
}

/// Power of the two-sided level-`alpha` test for effect `beta`.
pub fn power(beta: f64, sigma: f64, n_new: u64, alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    if !(sigma > 0.0) || n_new == 0 || !beta.is_finite() {
        return Err(Error::usage("power needs finite beta, sigma > 0 and n_new ≥ 1"));
    }
    if beta == 0.0 {
        return Ok(alpha);
    }
    Ok(power_with_z(beta, sigma, n_new, norm_isf(alpha / 2.0)))
}

fn power_with_z(beta: f64, sigma: f64, n_new: u64, z: f64) -> f64 {
    let shift = (n_new as f64).sqrt() * beta / sigma;
    norm_sf(z - shift) + norm_cdf(-z - shift)
}

/// Posterior summary of the number of significant SNPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub n_new: u64,
    pub alpha: f64,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    #[serde(skip)]
    pub per_draw: Vec<f64>,
}

/// Type-7 sample quantile (linear interpolation between order statistics).
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Expected discoveries per draw, their mean and 2.5%/97.5% quantiles.
pub fn expected_discoveries(pem: &PosteriorEffectMatrix, n_new: u64, alpha: f64) -> Result<Projection> {
    check_level(alpha)?;
    if n_new == 0 {
        return Err(Error::usage("n_new must be at least 1"));
    }
    if pem.n_draws < MIN_STABLE_DRAWS {
        log::warn!("only {} posterior draws; the 95% interval is unstable", pem.n_draws);
    }
    let z = norm_isf(alpha / 2.0);
    let per_draw: Vec<f64> = (0..pem.n_draws)
        .into_par_iter()
        .map(|j| {
            // null effects contribute exactly alpha each
            let mut nulls = 0usize;
            let mut sum = 0.0;
            for i in 0..pem.n_snps() {
                let b = pem.get(i, j);
                if b == 0.0 {
                    nulls += 1;
                } else {
                    sum += power_with_z(b, pem.sigma[i], n_new, z);
                }
            }
            nulls as f64 * alpha + sum
        })
        .collect();
    // shifted so that identical draws average to their common value
    let x0 = per_draw[0];
    let point = x0 + per_draw.iter().map(|x| x - x0).sum::<f64>() / per_draw.len() as f64;
    let mut sorted = per_draw.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(Projection {
        n_new,
        alpha,
        point,
        ci_lo: quantile_type7(&sorted, 0.025),
        ci_hi: quantile_type7(&sorted, 0.975),
        per_draw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rand_kit::RngStream;
    use rand::Rng;

    // Φ(x) via e^{-x²} Σ 2ⁿ x^{2n+1} / (2n+1)!!, all terms positive.
    fn phi_series(x: f64) -> f64 {
        let x = x / std::f64::consts::SQRT_2;
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-30 * sum.abs().max(1e-300) {
            n += 1.0;
            term *= 2.0 * x * x / (2.0 * n + 1.0);
            sum += term;
        }
        let erf = 2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp() * sum;
        0.5 * (1.0 + erf)
    }

    #[test]
    fn series_oracle_power() {
        let alpha = 5e-8;
        // z with Φc(z) = α/2, by bisection on the oracle's upper tail 1 − Φ(z)
        // computed as Φ(−z) to avoid cancellation
        let (mut lo, mut hi) = (5.0, 6.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi_series(-mid) > alpha / 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let z = 0.5 * (lo + hi);
        assert!((z - 5.4513).abs() < 1e-4, "{z}");
        let shift = (133_000f64).sqrt() * 0.004;
        assert!((shift - 1.4588).abs() < 1e-4);
        let expect = phi_series(-(z - shift)) + phi_series(-z - shift);
        let got = power(0.004, 1.0, 133_000, alpha).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn power_limits() {
        for alpha in [0.05, 5e-8] {
            assert!((power(0.0, 1.3, 1000, alpha).unwrap() - alpha).abs() < 1e-12 * alpha.max(1e-3));
            assert!(power(10.0, 1.0, 1000, alpha).unwrap() > 1.0 - 1e-12);
            assert!(power(-10.0, 1.0, 1000, alpha).unwrap() > 1.0 - 1e-12);
        }
        assert!(power(0.1, 1.0, 10, 0.0).is_err());
        assert!(power(0.1, 1.0, 10, 1.0).is_err());
        let mut prev = 0.0;
        for b in [0.0, 0.001, 0.002, 0.005, 0.01] {
            let p = power(b, 1.0, 500_000, 5e-8).unwrap();
            assert!(p > prev);
            assert_eq!(p, power(-b, 1.0, 500_000, 5e-8).unwrap());
            prev = p;
        }
    }

    #[test]
    fn null_matrix_gives_k_alpha() {
        let pem = PosteriorEffectMatrix::new(vec![0.0; 30 * 50], vec![1.0; 30], 50).unwrap();
        let proj = expected_discoveries(&pem, 133_000, 0.05).unwrap();
        assert_eq!(proj.point, 30.0 * 0.05);
        assert_eq!(proj.ci_lo, proj.point);
        assert_eq!(proj.ci_hi, proj.point);
        assert_eq!(power(0.0, 0.7, 1000, 5e-8).unwrap(), 5e-8);
    }

    #[test]
    fn monotone_in_sample_size_and_bounded() {
        let mut rng = RngStream::new(1, 0);
        let (k, n) = (200, 60);
        let beta = (0..k * n).map(|_| rng.random_range(-0.01..0.01)).collect();
        let sigma = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let pem = PosteriorEffectMatrix::new(beta, sigma, n).unwrap();
        let pts: Vec<f64> = [133_000, 253_000, 700_000]
            .iter()
            .map(|&m| expected_discoveries(&pem, m, 5e-8).unwrap().point)
            .collect();
        assert!(pts[0] < pts[1] && pts[1] < pts[2], "{pts:?}");
        assert!(pts.iter().all(|p| *p >= k as f64 * 5e-8 && *p <= k as f64));
    }

    #[test]
    fn duplicated_draws_keep_the_point_estimate() {
        let mut rng = RngStream::new(2, 0);
        let (k, n) = (20, 45);
        let beta: Vec<f64> = (0..k * n).map(|_| rng.random_range(-0.02..0.02)).collect();
        let sigma = vec![1.0; k];
        let pem = PosteriorEffectMatrix::new(beta.clone(), sigma.clone(), n).unwrap();
        let doubled: Vec<f64> =
            (0..k).flat_map(|i| { let row = &beta[i * n..(i + 1) * n]; row.iter().chain(row).copied().collect::<Vec<_>>() }).collect();
        let pem2 = PosteriorEffectMatrix::new(doubled, sigma, 2 * n).unwrap();
        let (a, b) = (expected_discoveries(&pem, 253_000, 5e-8).unwrap(), expected_discoveries(&pem2, 253_000, 5e-8).unwrap());
        assert!((a.point - b.point).abs() < 1e-9 * a.point.max(1.0));
        // type-7 quantiles of a duplicated sample move by less than one order-statistic gap
        let mut s = a.per_draw.clone();
        s.sort_by(f64::total_cmp);
        let gap = s.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        assert!((a.ci_lo - b.ci_lo).abs() <= gap && (a.ci_hi - b.ci_hi).abs() <= gap);
    }

    #[test]
    fn csv_ingestion() {
        let beta = "0.0,0.0\n0.0,0.0\n0.0,0.0\n";
        let sigma = "sigma\n1\n2\n0.5\n";
        let pem = PosteriorEffectMatrix::from_csv(beta.as_bytes(), sigma.as_bytes()).unwrap();
        assert_eq!((pem.n_snps(), pem.n_draws()), (3, 2));
        assert!(PosteriorEffectMatrix::from_csv("0,1\n0\n".as_bytes(), sigma.as_bytes()).is_err());
        assert!(PosteriorEffectMatrix::from_csv("0,x\n".as_bytes(), "sigma\n1\n".as_bytes()).is_err());
        assert!(PosteriorEffectMatrix::from_csv(beta.as_bytes(), "sigma\n1\n".as_bytes()).is_err());
    }
}
