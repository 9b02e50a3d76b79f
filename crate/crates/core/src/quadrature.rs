//! Gauss–Legendre rules: fixed, composite and adaptive.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Nodes and weights of an `n`-point Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, z);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&z, &w)| (mid + half * z, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

// (P_n(z), P_n'(z)) by the three-term recurrence
fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

fn rule15() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(15))
}

/// Ten-point rule shared by composite integrations.
pub fn rule10() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(10))
}

/// Adaptive bisection with a 15-point Gauss–Legendre rule on each piece.
///
/// A piece is accepted once the rule on the piece and on its two halves agree
/// within the tolerance allotted to that piece.
pub fn adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::domain(format!("adaptive quadrature needs finite limits, got [{a}, {b}]")));
    }
    let rule = rule15();
    let whole = rule.integrate(a, b, f);
    recurse(f, rule, a, b, whole, abs_tol, 0)
}

const MAX_DEPTH: usize = 50;

fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    rule: &GaussLegendre,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(a, mid, f);
    let right = rule.integrate(mid, b, f);
    let refined = left + right;
    if (refined - whole).abs() <= tol.max(f64::EPSILON * refined.abs()) {
        return Ok(refined);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::numeric(format!(
            "adaptive quadrature did not converge on [{a}, {b}]: estimate {refined}, \
             discrepancy {:.3e}, tolerance {tol:.3e}",
            (refined - whole).abs()
        )));
    }
    Ok(recurse(f, rule, a, mid, left, 0.5 * tol, depth + 1)?
        + recurse(f, rule, mid, b, right, 0.5 * tol, depth + 1)?)
}

/// Adaptive integration over `[a, b]` split at the given interior break points.
pub fn adaptive_with_breaks<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    breaks: &[f64],
    abs_tol: f64,
) -> Result<f64> {
    let mut points = vec![a];
    points.extend(breaks.iter().copied().filter(|&c| c > a && c < b));
    points.push(b);
    points.sort_by(f64::total_cmp);
    points.dedup();
    let pieces = (points.len() - 1).max(1) as f64;
    points
        .windows(2)
        .map(|w| adaptive(f, w[0], w[1], abs_tol / pieces))
        .sum()
}

/// Trapezoid rule on an arbitrary increasing grid.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_integrates_polynomials_exactly() {
        let rule = GaussLegendre::new(10);
        // degree 19 is exact for 10 nodes
        let exact = 2.0 / 20.0 * 0.0 + 2.0 / 19.0;
        let v = rule.integrate(-1.0, 1.0, |x| x.powi(18) + x.powi(19));
        assert!((v - exact).abs() < 1e-14);
        let w: f64 = GaussLegendre::new(1000).integrate(0.0, 1.0, |x| x * x);
        assert!((w - 1.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn adaptive_handles_kinks() {
        let f = |x: f64| (-x.abs()).exp();
        let v = adaptive_with_breaks(&f, -30.0, 30.0, &[0.0], 1e-12).unwrap();
        assert!((v - 2.0 * (1.0 - (-30f64).exp())).abs() < 1e-11);
    }

    #[test]
    fn adaptive_reports_non_convergence() {
        let f = |x: f64| if x > 0.123_456_7 { 1e12 } else { 0.0 };
        let err = adaptive(&f, 0.0, 1.0, 1e-300).unwrap_err();
        assert!(err.is_numeric());
    }
}
