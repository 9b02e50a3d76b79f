//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` and `;` start comments; blank lines are ignored.
//! Unknown keys, repeated keys and section headers are errors. Layers apply in
//! order: defaults, `--config` file, subcommand flags, `--set` overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cbdecon::baselines::NoiseMode;
use cbdecon::model::{ErrorKernel, Hyperparams};
use cbdecon::sampler::ChainConfig;
use cbdecon::simgen::ScenarioId;
use cbdecon::{Error, Result};
use sha2::{Digest, Sha256};

pub const KEYS: &[&str] = &[
    "lambda",
    "t",
    "xi1",
    "xi2",
    "k",
    "m",
    "n_iter",
    "burn_in",
    "thin",
    "n_chains",
    "latent_thin",
    "parallel_sites",
    "scenario",
    "n",
    "error",
    "rep",
    "reps",
    "noise_mode",
    "grid_half",
    "grid_points",
    "threshold",
    "n_new",
    "alpha_level",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hp: Hyperparams,
    pub chain: ChainConfig,
    pub scenario: ScenarioId,
    pub n: usize,
    pub error: ErrorKernel,
    pub rep: u64,
    pub reps: usize,
    /// `None`: heteroscedastic when the σ column varies.
    pub noise_mode: Option<NoiseMode>,
    /// `None`: chosen from the data.
    pub grid_half: Option<f64>,
    pub grid_points: usize,
    /// `None`: the scenario's own threshold.
    pub threshold: Option<f64>,
    pub n_new: Vec<u64>,
    pub alpha_level: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hp: Hyperparams::default(),
            chain: ChainConfig::default(),
            scenario: ScenarioId::T5Homo,
            n: 1000,
            error: ErrorKernel::Normal,
            rep: 0,
            reps: 1,
            noise_mode: None,
            grid_half: None,
            grid_points: 4001,
            threshold: None,
            n_new: vec![133_000, 253_000, 700_000],
            alpha_level: 5e-8,
        }
    }
}

/// Parses the text of a config file into ordered key/value pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            return Err(Error::Parse(format!("line {}: sections are not supported", i + 1)));
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim().to_string();
        if pairs.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Parse(format!("line {}: key '{k}' given twice", i + 1)));
        }
        pairs.push((k, v.trim().to_string()));
    }
    Ok(pairs)
}

/// Splits `key=value` from a `--set` flag.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::usage(format!("override '{s}' is not key=value")))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::usage(format!("{key}: cannot parse '{v}'")))
}

fn opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.eq_ignore_ascii_case("auto") || v.eq_ignore_ascii_case("none") || v.is_empty() {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lambda" => self.hp.lambda = num(key, v)?,
            "t" => self.hp.t = num(key, v)?,
            "xi1" => self.hp.xi1 = num(key, v)?,
            "xi2" => self.hp.xi2 = num(key, v)?,
            "k" => self.hp.k = num(key, v)?,
            "m" => self.hp.m = num(key, v)?,
            "n_iter" => self.chain.n_iter = num(key, v)?,
            "burn_in" => self.chain.burn_in = num(key, v)?,
            "thin" => self.chain.thin = num(key, v)?,
            "n_chains" => self.chain.n_chains = num(key, v)?,
            "latent_thin" => self.chain.latent_thin = opt(key, v)?,
            "parallel_sites" => self.chain.parallel_sites = num(key, v)?,
            "scenario" => self.scenario = v.parse()?,
            "n" => self.n = num(key, v)?,
            "error" => self.error = v.parse()?,
            "rep" => self.rep = num(key, v)?,
            "reps" => self.reps = num(key, v)?,
            "noise_mode" => {
                self.noise_mode = match v.to_ascii_lowercase().as_str() {
                    "auto" => None,
                    "homo" => Some(NoiseMode::Homo),
                    "hetero" => Some(NoiseMode::Hetero),
                    _ => return Err(Error::usage(format!("noise_mode: expected homo, hetero or auto, got '{v}'"))),
                }
            }
            "grid_half" => self.grid_half = opt(key, v)?,
            "grid_points" => self.grid_points = num(key, v)?,
            "threshold" => self.threshold = opt(key, v)?,
            "n_new" => {
                self.n_new = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
            }
            "alpha_level" => self.alpha_level = num(key, v)?,
            _ => {
                return Err(Error::usage(format!("unknown config key '{key}'; known keys: {}", KEYS.join(", "))))
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.chain.validate()?;
        if self.n == 0 || self.reps == 0 {
            return Err(Error::usage("n and reps must be positive"));
        }
        if self.grid_points < 3 {
            return Err(Error::usage("grid_points must be at least 3"));
        }
        if self.grid_half.is_some_and(|h| !(h > 0.0)) || self.threshold.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::usage("grid_half and threshold must be positive"));
        }
        if self.n_new.is_empty() || self.n_new.contains(&0) {
            return Err(Error::usage("n_new must list positive sample sizes"));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(Error::usage("alpha_level must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let auto = |o: Option<String>| o.unwrap_or_else(|| "auto".into());
        let mut m = BTreeMap::new();
        m.insert("lambda", self.hp.lambda.to_string());
        m.insert("t", self.hp.t.to_string());
        m.insert("xi1", self.hp.xi1.to_string());
        m.insert("xi2", self.hp.xi2.to_string());
        m.insert("k", self.hp.k.to_string());
        m.insert("m", self.hp.m.to_string());
        m.insert("n_iter", self.chain.n_iter.to_string());
        m.insert("burn_in", self.chain.burn_in.to_string());
        m.insert("thin", self.chain.thin.to_string());
        m.insert("n_chains", self.chain.n_chains.to_string());
        m.insert("latent_thin", auto(self.chain.latent_thin.map(|v| v.to_string())));
        m.insert("parallel_sites", self.chain.parallel_sites.to_string());
        m.insert("scenario", self.scenario.to_string());
        m.insert("n", self.n.to_string());
        m.insert("error", format!("{:?}", self.error).to_lowercase());
        m.insert("rep", self.rep.to_string());
        m.insert("reps", self.reps.to_string());
        m.insert(
            "noise_mode",
            auto(self.noise_mode.map(|v| format!("{v:?}").to_lowercase())),
        );
        m.insert("grid_half", auto(self.grid_half.map(|v| v.to_string())));
        m.insert("grid_points", self.grid_points.to_string());
        m.insert("threshold", auto(self.threshold.map(|v| v.to_string())));
        m.insert("n_new", self.n_new.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        m.insert("alpha_level", self.alpha_level.to_string());
        m
    }

    /// SHA-256 of the canonical `key=value` listing.
    pub fn hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(text, "{k}={v}");
        }
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
