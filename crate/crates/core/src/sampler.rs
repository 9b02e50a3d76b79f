//! Gibbs sampler with a Metropolis–Hastings step for the Gamma shapes.
//!
//! One sweep updates, in order: every `x_i`, every `θ_i`, every label `z_i`,
//! the weights `p`, the rates `β` and finally the shapes `α` by
//! Metropolis–Hastings with a truncated `Ga(2, 2/α)` proposal.
//!
//! Site updates (`x_i`, `θ_i`, `z_i`) are conditionally independent given the
//! global parameters. [`Chain`] processes them in fixed blocks of
//! [`SITE_BLOCK`] observations, each block owning its own random substream, so
//! the trajectory is identical whether blocks run serially or on a thread pool.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, DrawsMeta, ErrorKernel, Hyperparams, LatentState, MixtureParams, PosteriorDraws};
use crate::rand_kit::{
    sample_categorical_log, sample_dirichlet, sample_gamma_upper_tail, sample_truncated_exponential, sample_truncated_gamma,
    sample_truncated_laplace, sample_truncated_normal, RngStream,
};
use crate::special::ln_gamma;

/// Observations per independently seeded site block.
pub const SITE_BLOCK: usize = 512;

/// Length, burn-in, thinning and seeding of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub n_chains: usize,
    /// Run site blocks on the rayon pool. Output does not depend on this flag.
    pub parallel_sites: bool,
    /// Keep a snapshot of the latent `x` vector every this many post-burn-in sweeps.
    pub latent_thin: Option<usize>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 5000,
            burn_in: 1000,
            thin: 1,
            seed: 0,
            n_chains: 1,
            parallel_sites: false,
            latent_thin: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::usage("n_iter must be positive"));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::usage(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 || self.latent_thin == Some(0) {
            return Err(Error::usage("thinning strides must be at least 1"));
        }
        if self.n_chains == 0 {
            return Err(Error::usage("n_chains must be positive"));
        }
        Ok(())
    }

    /// Number of draws a run keeps.
    pub fn kept(&self) -> usize {
        (self.n_iter - self.burn_in).div_ceil(self.thin)
    }
}

/// Per-component counts `r_k`, sums `s_k = Σ θ_i` and `Σ ln θ_i` over members.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub r: Vec<usize>,
    pub s: Vec<f64>,
    pub sum_log_theta: Vec<f64>,
}

impl SufficientStats {
    pub fn zeros(k: usize) -> Self {
        Self { r: vec![0; k], s: vec![0.0; k], sum_log_theta: vec![0.0; k] }
    }

    pub fn compute(state: &LatentState, k: usize) -> Self {
        let mut stats = Self::zeros(k);
        for (&z, &th) in state.z.iter().zip(&state.theta) {
            stats.add(z, th);
        }
        stats
    }

    #[inline]
    fn add(&mut self, z: usize, theta: f64) {
        self.r[z] += 1;
        self.s[z] += theta;
        self.sum_log_theta[z] += theta.ln();
    }

    fn merge(&mut self, other: &Self) {
        for k in 0..self.r.len() {
            self.r[k] += other.r[k];
            self.s[k] += other.s[k];
            self.sum_log_theta[k] += other.sum_log_theta[k];
        }
    }
}

/// Starting point inside the support: `x = w`, `θ = |x| + 0.1·median(σ)`,
/// uniform labels, `α` and `β` from their priors and equal weights.
pub fn init_state<R: Rng + ?Sized>(
    data: &Dataset,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<(LatentState, MixtureParams)> {
    hp.validate()?;
    let pad = 0.1 * data.median_sigma();
    let x = data.w().to_vec();
    let theta = x.iter().map(|v| v.abs() + pad).collect();
    let z = (0..data.len()).map(|_| rng.random_range(0..hp.k)).collect();
    let alpha = (0..hp.k)
        .map(|_| sample_truncated_exponential(hp.lambda, hp.t, f64::INFINITY, rng))
        .collect::<Result<Vec<_>>>()?;
    let beta_prior = gamma(hp.xi1, hp.xi2)?;
    let beta = (0..hp.k).map(|_| beta_prior.sample(rng)).collect();
    let p = vec![1.0 / hp.k as f64; hp.k];
    Ok((LatentState { x, theta, z }, MixtureParams { p, alpha, beta }))
}

fn gamma(shape: f64, rate: f64) -> Result<Gamma<f64>> {
    Gamma::new(shape, 1.0 / rate).map_err(|e| Error::usage(format!("gamma({shape}, {rate}): {e}")))
}

// x_i | rest ~ Ψ(w_i, σ_i) truncated to [-θ_i, θ_i]; returns (x, clamped)
fn draw_x<R: Rng + ?Sized>(
    w: f64,
    sigma: f64,
    theta: f64,
    kernel: ErrorKernel,
    rng: &mut R,
) -> Result<(f64, bool)> {
    let drawn = match kernel {
        ErrorKernel::Normal => sample_truncated_normal(w, sigma, -theta, theta, rng),
        ErrorKernel::Laplace => sample_truncated_laplace(w, kernel.scale(sigma), -theta, theta, rng),
    };
    match drawn {
        Ok(x) => Ok((x, false)),
        Err(Error::Numeric(_)) => Ok((w.signum() * theta * (1.0 - 1e-12), true)),
        Err(e) => Err(e),
    }
}

// θ_i | rest ~ Ga(α_z − 1, β_z) truncated to [|x_i|, ∞)
#[inline]
fn draw_theta<R: Rng + ?Sized>(x: f64, alpha: f64, beta: f64, rng: &mut R) -> Result<f64> {
    // shape α − 1 > 1 here, so the rejection path is exact however far out |x| is
    let th = sample_gamma_upper_tail(alpha - 1.0, beta, x.abs(), rng)?;
    Ok(th.max(f64::MIN_POSITIVE))
}

/// Label log-weights `ln p_k − ln Γ(α_k) + α_k ln β_k + α_k ln θ − β_k θ`, split
/// into the θ-free constant and the per-site part.
#[derive(Debug, Clone)]
struct LabelWeights {
    constant: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl LabelWeights {
    fn new(params: &MixtureParams) -> Self {
        let constant = (0..params.k())
            .map(|k| params.p[k].ln() - ln_gamma(params.alpha[k]) + params.alpha[k] * params.beta[k].ln())
            .collect();
        Self { constant, alpha: params.alpha.clone(), beta: params.beta.clone() }
    }

    fn draw<R: Rng + ?Sized>(&self, site: usize, theta: f64, buf: &mut [f64], rng: &mut R) -> Result<usize> {
        let lt = theta.ln();
        for k in 0..buf.len() {
            buf[k] = self.constant[k] + self.alpha[k] * lt - self.beta[k] * theta;
        }
        sample_categorical_log(buf, rng).map_err(|_| {
            Error::numeric(format!("all label weights of observation {site} are zero (theta={theta})"))
        })
    }
}

/// Redraws every `x_i`; returns how many fell back to the boundary clamp.
pub fn update_x<R: Rng + ?Sized>(
    state: &mut LatentState,
    data: &Dataset,
    kernel: ErrorKernel,
    rng: &mut R,
) -> Result<usize> {
    let mut clamped = 0;
    for i in 0..state.x.len() {
        let (x, c) = draw_x(data.w()[i], data.sigma()[i], state.theta[i], kernel, rng)?;
        state.x[i] = x;
        clamped += c as usize;
    }
    if clamped > 0 {
        log::warn!("{clamped} x updates had negligible truncation mass and were clamped to the boundary");
    }
    Ok(clamped)
}

/// Redraws every `θ_i` from its truncated Gamma full conditional.
pub fn update_theta<R: Rng + ?Sized>(state: &mut LatentState, params: &MixtureParams, rng: &mut R) -> Result<()> {
    for i in 0..state.theta.len() {
        let z = state.z[i];
        state.theta[i] = draw_theta(state.x[i], params.alpha[z], params.beta[z], rng)?;
    }
    Ok(())
}

/// Redraws every label `z_i`.
pub fn update_z<R: Rng + ?Sized>(state: &mut LatentState, params: &MixtureParams, rng: &mut R) -> Result<()> {
    let weights = LabelWeights::new(params);
    let mut buf = vec![0.0; params.k()];
    for i in 0..state.z.len() {
        state.z[i] = weights.draw(i, state.theta[i], &mut buf, rng)?;
    }
    Ok(())
}

/// `p | rest ~ Dirichlet(m/K + r_1, …, m/K + r_K)`.
pub fn update_p<R: Rng + ?Sized>(stats: &SufficientStats, hp: &Hyperparams, rng: &mut R) -> Result<Vec<f64>> {
    let base = hp.m / hp.k as f64;
    let conc: Vec<f64> = stats.r.iter().map(|&r| base + r as f64).collect();
    sample_dirichlet(&conc, rng)
}

/// `β_k | rest ~ Ga(Ξ₁ + α_k r_k, Ξ₂ + s_k)`.
pub fn update_beta<R: Rng + ?Sized>(
    stats: &SufficientStats,
    alpha: &[f64],
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    (0..alpha.len())
        .map(|k| {
            let g = gamma(hp.xi1 + alpha[k] * stats.r[k] as f64, hp.xi2 + stats.s[k])?;
            Ok(g.sample(rng).max(f64::MIN_POSITIVE))
        })
        .collect()
}

/// Unnormalized log full conditional of `α_k`:
/// `−r ln Γ(α) − α (λ − r ln β − Σ ln θ)`.
pub fn alpha_log_target(alpha: f64, r: usize, log_beta: f64, sum_log_theta: f64, lambda: f64) -> f64 {
    let r = r as f64;
    -r * ln_gamma(alpha) - alpha * (lambda - r * log_beta - sum_log_theta)
}

/// Log density of the proposal `Ga(2, 2/from)` renormalized to `(t, ∞)`, at `to`.
pub fn alpha_proposal_log_density(to: f64, from: f64, t: f64) -> f64 {
    let rate = 2.0 / from;
    let z = rate * t;
    // Q(2, z) = e^{-z} (1 + z)
    let log_tail = -z + z.ln_1p();
    2.0 * rate.ln() + to.ln() - rate * to - log_tail
}

/// Log Metropolis–Hastings ratio for moving `α_k` from `current` to `proposal`.
pub fn alpha_mh_log_ratio(
    current: f64,
    proposal: f64,
    r: usize,
    log_beta: f64,
    sum_log_theta: f64,
    hp: &Hyperparams,
) -> f64 {
    if proposal == current {
        return 0.0;
    }
    alpha_log_target(proposal, r, log_beta, sum_log_theta, hp.lambda)
        - alpha_log_target(current, r, log_beta, sum_log_theta, hp.lambda)
        + alpha_proposal_log_density(current, proposal, hp.t)
        - alpha_proposal_log_density(proposal, current, hp.t)
}

/// One Metropolis–Hastings step per `α_k`; returns the new shapes and acceptance flags.
pub fn update_alpha_mh<R: Rng + ?Sized>(
    stats: &SufficientStats,
    params: &MixtureParams,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut alpha = params.alpha.clone();
    let mut accepted = vec![false; alpha.len()];
    for k in 0..alpha.len() {
        let current = alpha[k];
        let proposal = sample_truncated_gamma(2.0, 2.0 / current, hp.t, f64::INFINITY, rng)?;
        if proposal <= hp.t {
            continue;
        }
        let log_ratio =
            alpha_mh_log_ratio(current, proposal, stats.r[k], params.beta[k].ln(), stats.sum_log_theta[k], hp);
        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            alpha[k] = proposal;
            accepted[k] = true;
        }
    }
    Ok((alpha, accepted))
}

/// What a sweep did besides moving the state.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepInfo {
    pub alpha_accepted: Vec<bool>,
    pub clamped_x: usize,
}

// p, then β, then α
fn update_globals<R: Rng + ?Sized>(
    stats: &SufficientStats,
    params: &mut MixtureParams,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<Vec<bool>> {
    params.p = update_p(stats, hp, rng)?;
    params.beta = update_beta(stats, &params.alpha, hp, rng)?;
    let (alpha, accepted) = update_alpha_mh(stats, params, hp, rng)?;
    params.alpha = alpha;
    Ok(accepted)
}

/// One full sweep with a single random stream.
pub fn sweep<R: Rng + ?Sized>(
    state: &mut LatentState,
    params: &mut MixtureParams,
    data: &Dataset,
    kernel: ErrorKernel,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<SweepInfo> {
    let clamped_x = update_x(state, data, kernel, rng)?;
    update_theta(state, params, rng)?;
    update_z(state, params, rng)?;
    let stats = SufficientStats::compute(state, hp.k);
    let alpha_accepted = update_globals(&stats, params, hp, rng)?;
    Ok(SweepInfo { alpha_accepted, clamped_x })
}

/// A running chain: data, current state and the random streams driving it.
#[derive(Debug, Clone)]
pub struct Chain {
    data: Dataset,
    kernel: ErrorKernel,
    hp: Hyperparams,
    state: LatentState,
    params: MixtureParams,
    global_rng: RngStream,
    site_rngs: Vec<RngStream>,
    parallel: bool,
}

struct BlockOutcome {
    stats: SufficientStats,
    clamped: usize,
}

impl Chain {
    /// Initializes with [`init_state`] from stream `(seed, chain_id)`.
    pub fn new(
        data: Dataset,
        kernel: ErrorKernel,
        hp: Hyperparams,
        seed: u64,
        chain_id: u64,
        parallel: bool,
    ) -> Result<Self> {
        hp.validate()?;
        let mut global_rng = RngStream::new(seed, chain_id);
        let (state, params) = init_state(&data, &hp, &mut global_rng)?;
        Ok(Self::assemble(data, kernel, hp, state, params, global_rng, parallel))
    }

    /// Starts from a given state instead of [`init_state`], e.g. to resume a run.
    #[allow(clippy::too_many_arguments)]
    pub fn with_state(
        data: Dataset,
        kernel: ErrorKernel,
        hp: Hyperparams,
        state: LatentState,
        params: MixtureParams,
        seed: u64,
        chain_id: u64,
        parallel: bool,
    ) -> Result<Self> {
        hp.validate()?;
        if state.x.len() != data.len() {
            return Err(Error::usage("latent state length differs from the number of observations"));
        }
        if params.k() != hp.k {
            return Err(Error::usage("mixture parameters do not have K components"));
        }
        state.validate(hp.k)?;
        params.validate(hp.t)?;
        let global_rng = RngStream::new(seed, chain_id);
        Ok(Self::assemble(data, kernel, hp, state, params, global_rng, parallel))
    }

    fn assemble(
        data: Dataset,
        kernel: ErrorKernel,
        hp: Hyperparams,
        state: LatentState,
        params: MixtureParams,
        global_rng: RngStream,
        parallel: bool,
    ) -> Self {
        let blocks = data.len().div_ceil(SITE_BLOCK);
        let site_rngs = (0..blocks as u64).map(|b| global_rng.substream(b)).collect();
        Self { data, kernel, hp, state, params, global_rng, site_rngs, parallel }
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn params(&self) -> &MixtureParams {
        &self.params
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Replaces the observations, keeping the latent state (same length required).
    pub fn set_data(&mut self, data: Dataset) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::usage("replacement data must keep the number of observations"));
        }
        self.data = data;
        Ok(())
    }

    /// Random stream used for the global updates.
    pub fn rng(&mut self) -> &mut RngStream {
        &mut self.global_rng
    }

    /// One sweep in the fixed update order.
    pub fn step(&mut self) -> Result<SweepInfo> {
        let k = self.hp.k;
        let kernel = self.kernel;
        let weights = LabelWeights::new(&self.params);
        let params = &self.params;
        let process = |((((x, theta), z), (w, sigma)), rng): (
            (((&mut [f64], &mut [f64]), &mut [usize]), (&[f64], &[f64])),
            &mut RngStream,
        ),
                       block: usize|
         -> Result<BlockOutcome> {
            let mut out = BlockOutcome { stats: SufficientStats::zeros(k), clamped: 0 };
            let mut buf = vec![0.0; k];
            for i in 0..x.len() {
                let (xi, c) = draw_x(w[i], sigma[i], theta[i], kernel, rng)?;
                x[i] = xi;
                out.clamped += c as usize;
                theta[i] = draw_theta(xi, params.alpha[z[i]], params.beta[z[i]], rng)?;
                z[i] = weights.draw(block * SITE_BLOCK + i, theta[i], &mut buf, rng)?;
                out.stats.add(z[i], theta[i]);
            }
            Ok(out)
        };
        let state = &mut self.state;
        let (w, sigma) = (self.data.w(), self.data.sigma());
        let outcomes: Vec<BlockOutcome> = if self.parallel {
            state
                .x
                .par_chunks_mut(SITE_BLOCK)
                .zip(state.theta.par_chunks_mut(SITE_BLOCK))
                .zip(state.z.par_chunks_mut(SITE_BLOCK))
                .zip(w.par_chunks(SITE_BLOCK).zip(sigma.par_chunks(SITE_BLOCK)))
                .zip(self.site_rngs.par_iter_mut())
                .enumerate()
                .map(|(b, item)| process(item, b))
                .collect::<Result<_>>()?
        } else {
            state
                .x
                .chunks_mut(SITE_BLOCK)
                .zip(state.theta.chunks_mut(SITE_BLOCK))
                .zip(state.z.chunks_mut(SITE_BLOCK))
                .zip(w.chunks(SITE_BLOCK).zip(sigma.chunks(SITE_BLOCK)))
                .zip(self.site_rngs.iter_mut())
                .enumerate()
                .map(|(b, item)| process(item, b))
                .collect::<Result<_>>()?
        };
        let mut stats = SufficientStats::zeros(k);
        let mut clamped_x = 0;
        for o in &outcomes {
            stats.merge(&o.stats);
            clamped_x += o.clamped;
        }
        if clamped_x > 0 {
            log::warn!("{clamped_x} x updates had negligible truncation mass and were clamped to the boundary");
        }
        let alpha_accepted = update_globals(&stats, &mut self.params, &self.hp, &mut self.global_rng)?;
        Ok(SweepInfo { alpha_accepted, clamped_x })
    }
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("iteration {it}: {m}")),
        Error::Usage(m) => Error::Usage(format!("iteration {it}: {m}")),
        Error::Domain(m) => Error::Domain(format!("iteration {it}: {m}")),
        other => other,
    }
}

/// Runs one chain (stream id 0) and keeps every `thin`-th post-burn-in draw.
pub fn run_chain(data: &Dataset, kernel: ErrorKernel, hp: &Hyperparams, cfg: &ChainConfig) -> Result<PosteriorDraws> {
    run_chain_with_id(data, kernel, hp, cfg, 0)
}

/// Runs `cfg.n_chains` independent chains (stream ids `0..n_chains`) concurrently.
pub fn run_chains(
    data: &Dataset,
    kernel: ErrorKernel,
    hp: &Hyperparams,
    cfg: &ChainConfig,
) -> Result<Vec<PosteriorDraws>> {
    cfg.validate()?;
    (0..cfg.n_chains as u64)
        .into_par_iter()
        .map(|c| run_chain_with_id(data, kernel, hp, cfg, c))
        .collect()
}

fn run_chain_with_id(
    data: &Dataset,
    kernel: ErrorKernel,
    hp: &Hyperparams,
    cfg: &ChainConfig,
    chain_id: u64,
) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let mut chain = Chain::new(data.clone(), kernel, hp.clone(), cfg.seed, chain_id, cfg.parallel_sites)?;
    let mut draws = Vec::with_capacity(cfg.kept());
    let mut latent_x = Vec::new();
    let mut accepted = vec![0usize; hp.k];
    let mut clamped_x = 0;
    for it in 0..cfg.n_iter {
        let info = chain.step().map_err(|e| at_iteration(e, it))?;
        for (a, hit) in accepted.iter_mut().zip(&info.alpha_accepted) {
            *a += *hit as usize;
        }
        clamped_x += info.clamped_x;
        if it < cfg.burn_in {
            continue;
        }
        let since = it - cfg.burn_in;
        if since.is_multiple_of(cfg.thin) {
            draws.push(chain.params.clone());
        }
        if cfg.latent_thin.is_some_and(|l| since.is_multiple_of(l)) {
            latent_x.push(chain.state.x.clone());
        }
    }
    let meta = DrawsMeta {
        n_iter: cfg.n_iter,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        seed: cfg.seed,
        chain: chain_id,
        latent_thin: cfg.latent_thin,
        alpha_acceptance: accepted.iter().map(|&a| a as f64 / cfg.n_iter as f64).collect(),
        clamped_x,
    };
    Ok(PosteriorDraws { draws, latent_x, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed, 99);
        let w = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        Dataset::new(w, sigma).unwrap()
    }

    #[test]
    fn init_state_satisfies_invariants() {
        let data = toy_data(3, 1);
        let hp = Hyperparams { k: 2, ..Hyperparams::default() };
        let (s1, p1) = init_state(&data, &hp, &mut RngStream::new(5, 0)).unwrap();
        let (s2, p2) = init_state(&data, &hp, &mut RngStream::new(5, 0)).unwrap();
        assert_eq!((&s1, &p1), (&s2, &p2));
        s1.validate(2).unwrap();
        p1.validate(hp.t).unwrap();
        assert!(s1.z.iter().all(|&z| z < 2));
        assert!(s1.x.iter().zip(&s1.theta).all(|(x, t)| x.abs() < *t));
    }

    #[test]
    fn chain_resumes_from_a_given_state() {
        let data = toy_data(30, 4);
        let hp = Hyperparams { k: 3, ..Hyperparams::default() };
        let (state, params) = init_state(&data, &hp, &mut RngStream::new(1, 0)).unwrap();
        let mut a = Chain::with_state(data.clone(), ErrorKernel::Normal, hp.clone(), state.clone(), params.clone(), 8, 0, false)
            .unwrap();
        let mut b = Chain::with_state(data.clone(), ErrorKernel::Normal, hp.clone(), state.clone(), params.clone(), 8, 0, false)
            .unwrap();
        assert_eq!(a.state(), &state);
        for _ in 0..20 {
            a.step().unwrap();
            b.step().unwrap();
        }
        assert_eq!((a.state(), a.params()), (b.state(), b.params()));

        let mut bad = state.clone();
        bad.theta[0] = bad.x[0].abs() * 0.5;
        assert!(Chain::with_state(data.clone(), ErrorKernel::Normal, hp.clone(), bad, params.clone(), 8, 0, false).is_err());
        let two = Hyperparams { k: 2, ..hp };
        assert!(Chain::with_state(data, ErrorKernel::Normal, two, state, params, 8, 0, false).is_err());
    }

    #[test]
    fn theta_update_survives_underflowing_tail() {
        // Ga(α − 1, β) mass beyond |x| is far below the smallest double here
        let mut rng = RngStream::new(2, 0);
        for _ in 0..1000 {
            let th = draw_theta(2043.64, 4.0, 3.0, &mut rng).unwrap();
            assert!((2043.64..2060.0).contains(&th));
        }
    }

    #[test]
    fn identity_move_has_unit_ratio() {
        let hp = Hyperparams::default();
        assert_eq!(alpha_mh_log_ratio(3.7, 3.7, 12, 0.4, -2.0, &hp), 0.0);
    }

    #[test]
    fn hand_computed_mh_ratio() {
        let hp = Hyperparams { lambda: 2.0, t: 2.5, ..Hyperparams::default() };
        // target ratio: (Γ(3)/Γ(4))² · exp(−(4 − 3)(2 − 2·ln 1 − 0.7))
        let target = (2.0f64 / 6.0).powi(2) * (-1.3f64).exp();
        // Ga(2, 2/a) truncated to (2.5, ∞): density r² y e^{−r y} / (e^{−r t}(1 + r t))
        let q = |y: f64, a: f64| {
            let r = 2.0 / a;
            r * r * y * (-r * y).exp() / ((-r * 2.5f64).exp() * (1.0 + r * 2.5))
        };
        let expect = (target * q(3.0, 4.0) / q(4.0, 3.0)).ln();
        let got = alpha_mh_log_ratio(3.0, 4.0, 2, 0.0, 0.7, &hp);
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn sweeps_preserve_support_and_replay() {
        let data = toy_data(40, 2);
        let hp = Hyperparams::default();
        let run = |seed| {
            let mut rng = RngStream::new(seed, 0);
            let (mut s, mut p) = init_state(&data, &hp, &mut rng).unwrap();
            for _ in 0..1000 {
                sweep(&mut s, &mut p, &data, ErrorKernel::Normal, &hp, &mut rng).unwrap();
                s.validate(hp.k).unwrap();
                p.validate(hp.t).unwrap();
            }
            (s, p)
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn laplace_sweeps_preserve_support() {
        let data = toy_data(30, 3);
        let hp = Hyperparams { k: 3, ..Hyperparams::default() };
        let mut chain = Chain::new(data, ErrorKernel::Laplace, hp.clone(), 4, 0, false).unwrap();
        for _ in 0..300 {
            chain.step().unwrap();
            chain.state().validate(3).unwrap();
            chain.params().validate(hp.t).unwrap();
        }
    }

    #[test]
    fn parallel_blocks_match_serial() {
        let data = toy_data(3 * SITE_BLOCK + 17, 4);
        let hp = Hyperparams::default();
        let run = |parallel| {
            let mut c = Chain::new(data.clone(), ErrorKernel::Normal, hp.clone(), 8, 1, parallel).unwrap();
            for _ in 0..5 {
                c.step().unwrap();
            }
            (c.state().clone(), c.params().clone())
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn run_chain_keeps_the_right_number_of_draws() {
        let data = toy_data(10, 5);
        let cfg = ChainConfig { n_iter: 100, burn_in: 50, thin: 5, latent_thin: Some(25), ..ChainConfig::default() };
        let draws = run_chain(&data, ErrorKernel::Normal, &Hyperparams::default(), &cfg).unwrap();
        assert_eq!(draws.len(), 10);
        assert_eq!(cfg.kept(), 10);
        assert_eq!(draws.latent_x.len(), 2);
        assert!(draws.meta.alpha_acceptance.iter().all(|a| (0.0..=1.0).contains(a)));
        let again = run_chain(&data, ErrorKernel::Normal, &Hyperparams::default(), &cfg).unwrap();
        assert_eq!(draws, again);
    }

    #[test]
    fn config_validation() {
        assert!(ChainConfig { burn_in: 10, n_iter: 10, ..ChainConfig::default() }.validate().is_err());
        assert!(ChainConfig { thin: 0, ..ChainConfig::default() }.validate().is_err());
        ChainConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_component_beta_reverts_to_prior_shape() {
        let stats = SufficientStats::zeros(1);
        let hp = Hyperparams::default();
        let mut rng = RngStream::new(1, 0);
        let n = 200_000;
        let mean = (0..n).map(|_| update_beta(&stats, &[3.0], &hp, &mut rng).unwrap()[0]).sum::<f64>() / n as f64;
        // Ga(1, 4): mean 0.25, sd 0.25
        assert!((mean - 0.25).abs() < 3.0 * 0.25 / (n as f64).sqrt());
    }

    fn params2(p: [f64; 2], alpha: [f64; 2], beta: [f64; 2]) -> MixtureParams {
        MixtureParams::new(p.to_vec(), alpha.to_vec(), beta.to_vec()).unwrap()
    }

    fn within_se(xs: &[f64], expect: f64, k: f64) {
        let (m, _) = crate::diagnostics::mean_var(xs);
        let se = crate::diagnostics::iid_se(xs);
        assert!((m - expect).abs() < k * se, "mean {m} vs {expect} (se {se})");
    }

    #[test]
    fn label_probability_matches_direct_evaluation() {
        let params = params2([0.5, 0.5], [3.0, 3.0], [1.0, 4.0]);
        let expect = (-2.0f64).exp() / ((-2.0f64).exp() + 64.0 * (-8.0f64).exp());
        assert!((expect - 0.863081).abs() < 1e-6);
        let n = 1_000_000;
        let mut state = LatentState { x: vec![0.0; n], theta: vec![2.0; n], z: vec![0; n] };
        update_z(&mut state, &params, &mut RngStream::new(1, 0)).unwrap();
        let hits: Vec<f64> = state.z.iter().map(|&z| (z == 0) as u8 as f64).collect();
        within_se(&hits, expect, 3.0);
    }

    #[test]
    fn exchangeable_and_empty_labels() {
        let n = 100_000;
        let mut state = LatentState { x: vec![0.0; n], theta: vec![1.3; n], z: vec![0; n] };
        update_z(&mut state, &params2([0.5, 0.5], [3.0, 3.0], [2.0, 2.0]), &mut RngStream::new(2, 0)).unwrap();
        let hits: Vec<f64> = state.z.iter().map(|&z| (z == 0) as u8 as f64).collect();
        within_se(&hits, 0.5, 3.0);
        update_z(&mut state, &params2([1.0, 0.0], [3.0, 3.0], [2.0, 2.0]), &mut RngStream::new(2, 0)).unwrap();
        assert!(state.z.iter().all(|&z| z == 0));
    }

    #[test]
    fn weights_follow_dirichlet_posterior() {
        let hp = Hyperparams { k: 2, m: 20.0, ..Hyperparams::default() };
        let stats = SufficientStats { r: vec![3, 1], s: vec![1.0, 1.0], sum_log_theta: vec![0.0, 0.0] };
        let mut rng = RngStream::new(3, 0);
        let p1: Vec<f64> = (0..1_000_000).map(|_| update_p(&stats, &hp, &mut rng).unwrap()[0]).collect();
        within_se(&p1, 13.0 / 24.0, 3.0);

        let n = 50;
        let stats = SufficientStats { r: vec![n, 0], s: vec![1.0, 0.0], sum_log_theta: vec![0.0, 0.0] };
        let draws: Vec<Vec<f64>> = (0..200_000).map(|_| update_p(&stats, &hp, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        let p1: Vec<f64> = draws.iter().map(|p| p[0]).collect();
        within_se(&p1, (10.0 + n as f64) / (20.0 + n as f64), 3.0);
    }

    #[test]
    fn rates_follow_gamma_posterior() {
        let hp = Hyperparams { xi1: 1.0, xi2: 4.0, ..Hyperparams::default() };
        let stats = SufficientStats { r: vec![2], s: vec![5.0], sum_log_theta: vec![0.0] };
        let mut rng = RngStream::new(4, 0);
        let b: Vec<f64> = (0..1_000_000).map(|_| update_beta(&stats, &[3.0], &hp, &mut rng).unwrap()[0]).collect();
        assert!(b.iter().all(|&v| v > 0.0));
        within_se(&b, 7.0 / 9.0, 3.0);
    }

    #[test]
    fn empty_component_recovers_priors() {
        use crate::diagnostics::ks_one_sample;
        use crate::special::gamma_p;
        let hp = Hyperparams::default();
        let stats = SufficientStats::zeros(1);
        let mut rng = RngStream::new(5, 0);
        let mut params = MixtureParams::new(vec![1.0], vec![3.0], vec![1.0]).unwrap();
        let (mut alphas, mut betas) = (Vec::new(), Vec::new());
        for it in 0..1_000_000 {
            params.beta = update_beta(&stats, &params.alpha, &hp, &mut rng).unwrap();
            params.alpha = update_alpha_mh(&stats, &params, &hp, &mut rng).unwrap().0;
            if it % 10 == 0 {
                alphas.push(params.alpha[0]);
                betas.push(params.beta[0]);
            }
        }
        let ka = ks_one_sample(&alphas, |a| 1.0 - (-hp.lambda * (a - hp.t)).exp()).unwrap();
        let kb = ks_one_sample(&betas, |b| gamma_p(hp.xi1, hp.xi2 * b).unwrap()).unwrap();
        assert!(ka.p_value > 0.001, "alpha {ka:?}");
        assert!(kb.p_value > 0.001, "beta {kb:?}");
    }

    fn rejection<F: FnMut(&mut RngStream) -> f64>(mut draw: F, keep: impl Fn(f64) -> bool, n: usize) -> Vec<f64> {
        let mut rng = RngStream::new(77, 7);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let v = draw(&mut rng);
            if keep(v) {
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn x_update_conditionals() {
        use rand_distr::Normal;
        let n = 100_000;
        let data = |w: f64, s: f64| Dataset::new(vec![w; n], vec![s; n]).unwrap();
        let mut rng = RngStream::new(6, 0);

        // truncation inactive
        let mut st = LatentState { x: vec![0.0; n], theta: vec![1e6; n], z: vec![0; n] };
        update_x(&mut st, &data(0.7, 1.3), ErrorKernel::Normal, &mut rng).unwrap();
        let ks = crate::diagnostics::ks_one_sample(&st.x, |v| crate::special::norm_cdf((v - 0.7) / 1.3)).unwrap();
        assert!(ks.p_value > 0.001, "{ks:?}");

        // symmetric about zero when w = 0
        let mut st = LatentState { x: vec![0.0; n], theta: vec![1.0; n], z: vec![0; n] };
        update_x(&mut st, &data(0.0, 1.0), ErrorKernel::Normal, &mut rng).unwrap();
        let pos = st.x.iter().filter(|&&v| v > 0.0).count() as f64;
        assert!((pos - n as f64 / 2.0).abs() < 2.58 * (n as f64 / 4.0).sqrt());

        // w=2, σ=0.5, θ=1 against rejection
        let mut st = LatentState { x: vec![0.0; n], theta: vec![1.0; n], z: vec![0; n] };
        update_x(&mut st, &data(2.0, 0.5), ErrorKernel::Normal, &mut rng).unwrap();
        let norm = Normal::new(2.0, 0.5).unwrap();
        let oracle = rejection(|r| norm.sample(r), |v| v.abs() <= 1.0, n);
        let (mo, _) = crate::diagnostics::mean_var(&oracle);
        let se = (crate::diagnostics::iid_se(&oracle).powi(2) + crate::diagnostics::iid_se(&st.x).powi(2)).sqrt();
        let (mx, _) = crate::diagnostics::mean_var(&st.x);
        assert!((mx - mo).abs() < 3.0 * se, "{mx} vs {mo}");
        assert!(st.x.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn theta_update_conditionals() {
        let n = 200_000;
        let mut rng = RngStream::new(8, 0);
        let one = MixtureParams::new(vec![1.0], vec![3.0], vec![2.0]).unwrap();
        let mut st = LatentState { x: vec![0.0; n], theta: vec![1.0; n], z: vec![0; n] };
        update_theta(&mut st, &one, &mut rng).unwrap();
        within_se(&st.theta, 1.0, 3.0);

        let one = MixtureParams::new(vec![1.0], vec![2.5], vec![1.0]).unwrap();
        let mut st = LatentState { x: vec![0.4; n], theta: vec![1.0; n], z: vec![0; n] };
        update_theta(&mut st, &one, &mut rng).unwrap();
        assert!(st.theta.iter().all(|&t| t >= 0.4));
        let g = Gamma::new(1.5, 1.0).unwrap();
        let oracle = rejection(|r| g.sample(r), |v| v >= 0.4, n);
        let (mo, _) = crate::diagnostics::mean_var(&oracle);
        let (mt, _) = crate::diagnostics::mean_var(&st.theta);
        let se = (crate::diagnostics::iid_se(&oracle).powi(2) + crate::diagnostics::iid_se(&st.theta).powi(2)).sqrt();
        assert!((mt - mo).abs() < 3.0 * se, "{mt} vs {mo}");
    }

    #[test]
    fn chains_with_different_seeds_agree_at_zero() {
        let data = toy_data(200, 9);
        let hp = Hyperparams::default();
        let run = |seed| {
            let cfg = ChainConfig { n_iter: 3000, burn_in: 500, seed, ..ChainConfig::default() };
            let d = run_chain(&data, ErrorKernel::Normal, &hp, &cfg).unwrap();
            let f0: Vec<f64> = d.draws.iter().map(|p| crate::model::eval_latent_density(p, 0.0).unwrap()).collect();
            let (m, _) = crate::diagnostics::mean_var(&f0);
            (m, crate::diagnostics::batch_means_se(&f0, 25).unwrap())
        };
        let (a, sa) = run(1);
        let (b, sb) = run(2);
        assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{a}±{sa} vs {b}±{sb}");
    }
}
