//! Simulation scenarios with exact truth densities for scoring.
//!
//! Latent laws are the raw (unstandardized) Student t with five degrees of
//! freedom, or the peaked mixture `0.8·N(0, σ₀₀²) + 0.2·t₅`. Homoscedastic noise
//! variance is 1.66 for the t₅ scenarios and 0.36 for the peaked ones;
//! heteroscedastic noise uses `σᵢ = |1 + Xᵢ/4|` and `σᵢ = |0.75 + Xᵢ/4|`.

use std::fmt;
use std::str::FromStr;

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Density;
use crate::model::{Dataset, ErrorKernel};
use crate::rand_kit::{standard_normal, RngStream, DATA_STREAM};
use crate::special::{norm_cdf, norm_pdf, t5};

/// Smallest noise scale a heteroscedastic rule may produce.
pub const MIN_SIGMA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioId {
    T5Homo,
    T5Hetero,
    PeakHomo,
    PeakHetero,
    Peak01Homo,
    Peak01Hetero,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 6] = [
        ScenarioId::T5Homo,
        ScenarioId::T5Hetero,
        ScenarioId::PeakHomo,
        ScenarioId::PeakHetero,
        ScenarioId::Peak01Homo,
        ScenarioId::Peak01Hetero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::T5Homo => "T5_HOMO",
            ScenarioId::T5Hetero => "T5_HETERO",
            ScenarioId::PeakHomo => "PEAK_HOMO",
            ScenarioId::PeakHetero => "PEAK_HETERO",
            ScenarioId::Peak01Homo => "PEAK01_HOMO",
            ScenarioId::Peak01Hetero => "PEAK01_HETERO",
        }
    }

    pub fn truth(self) -> Truth {
        match self {
            ScenarioId::T5Homo | ScenarioId::T5Hetero => Truth::T5,
            ScenarioId::PeakHomo | ScenarioId::PeakHetero => Truth::Peak { sd: 0.2 },
            ScenarioId::Peak01Homo | ScenarioId::Peak01Hetero => Truth::Peak { sd: 0.1 },
        }
    }

    pub fn is_heteroscedastic(self) -> bool {
        matches!(self, ScenarioId::T5Hetero | ScenarioId::PeakHetero | ScenarioId::Peak01Hetero)
    }

    /// Noise standard deviation for an observation with latent value `x`.
    pub fn noise_sd(self, x: f64) -> f64 {
        let sd = match self {
            ScenarioId::T5Homo => 1.66f64.sqrt(),
            ScenarioId::PeakHomo | ScenarioId::Peak01Homo => 0.6,
            ScenarioId::T5Hetero => (1.0 + x / 4.0).abs(),
            ScenarioId::PeakHetero | ScenarioId::Peak01Hetero => (0.75 + x / 4.0).abs(),
        };
        sd.max(MIN_SIGMA)
    }

    /// Exceedance threshold, three times the peak SD; `None` for t₅ scenarios.
    pub fn exceedance_threshold(self) -> Option<f64> {
        match self.truth() {
            Truth::T5 => None,
            Truth::Peak { sd } => Some(3.0 * sd),
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::usage(format!("unknown scenario '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: ScenarioId,
    pub error_family: ErrorKernel,
    pub n: usize,
}

/// Latent law of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Truth {
    T5,
    /// `0.8·N(0, sd²) + 0.2·t₅`
    Peak { sd: f64 },
}

const PEAK_WEIGHT: f64 = 0.8;

impl Truth {
    pub fn variance(self) -> f64 {
        match self {
            Truth::T5 => t5::VARIANCE,
            Truth::Peak { sd } => PEAK_WEIGHT * sd * sd + (1.0 - PEAK_WEIGHT) * t5::VARIANCE,
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, t: &StudentT<f64>, rng: &mut R) -> f64 {
        match self {
            Truth::T5 => t.sample(rng),
            Truth::Peak { sd } => {
                if rng.random::<f64>() < PEAK_WEIGHT {
                    sd * standard_normal(rng)
                } else {
                    t.sample(rng)
                }
            }
        }
    }
}

impl Density for Truth {
    fn pdf(&self, x: f64) -> f64 {
        match *self {
            Truth::T5 => t5::pdf(x),
            Truth::Peak { sd } => PEAK_WEIGHT * norm_pdf(x / sd) / sd + (1.0 - PEAK_WEIGHT) * t5::pdf(x),
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        match *self {
            Truth::T5 => t5::cdf(x),
            Truth::Peak { sd } => PEAK_WEIGHT * norm_cdf(x / sd) + (1.0 - PEAK_WEIGHT) * t5::cdf(x),
        }
    }

    fn support(&self) -> (f64, f64) {
        (-60.0, 60.0)
    }
}

/// A simulated data set with its truth.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub scenario: Scenario,
    pub data: Dataset,
    pub truth: Truth,
    pub latent_x: Vec<f64>,
}

/// Draws replicate 0 of a scenario.
pub fn simulate(scn: &Scenario, seed: u64) -> Result<Simulated> {
    simulate_replicate(scn, seed, 0)
}

/// Draws a replicate from stream `(seed, DATA_STREAM + rep)`.
pub fn simulate_replicate(scn: &Scenario, seed: u64, rep: u64) -> Result<Simulated> {
    simulate_with(scn, &mut RngStream::new(seed, DATA_STREAM + rep))
}

pub fn simulate_with<R: Rng + ?Sized>(scn: &Scenario, rng: &mut R) -> Result<Simulated> {
    if scn.n == 0 {
        return Err(Error::usage("scenario sample size must be at least 1"));
    }
    let truth = scn.id.truth();
    let t = StudentT::new(5.0).expect("5 degrees of freedom");
    let mut w = Vec::with_capacity(scn.n);
    let mut sigma = Vec::with_capacity(scn.n);
    let mut latent_x = Vec::with_capacity(scn.n);
    for _ in 0..scn.n {
        let x = truth.sample(&t, rng);
        let sd = scn.id.noise_sd(x);
        let u: f64 = rng.sample(Open01);
        latent_x.push(x);
        sigma.push(sd);
        w.push(x + scn.error_family.quantile(u, sd));
    }
    Ok(Simulated { scenario: *scn, data: Dataset::new(w, sigma)?, truth, latent_x })
}

/// Density of the truth at `x`.
pub fn truth_pdf(id: ScenarioId, x: f64) -> f64 {
    id.truth().pdf(x)
}
