use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use cbdecon::baselines::{decon_kde, naive_kde, KernelSpec, NoiseMode};
use cbdecon::diagnostics::{batch_means_se, mean_var};
use cbdecon::metrics::{
    default_grid, extended_grid, score, summarize, symmetric_grid, Density, MetricRow, Scores, SUMMARY_HEADER,
};
use cbdecon::model::{
    eval_latent_density, fmt_num, posterior_mean_values, Dataset, DensityEstimate, LatentDensity, MixtureParams, PosteriorDraws,
};
use cbdecon::projection::{expected_discoveries, PosteriorEffectMatrix, Projection};
use cbdecon::sampler::{run_chain, run_chains, ChainConfig};
use cbdecon::simgen::{simulate_replicate, Scenario, ScenarioId, Simulated};

use crate::config::RunConfig;

/// Reach of the CB grid in the benchmark, so the stored estimate keeps its tails.
const BENCH_REACH: f64 = 500.0;

pub struct Ctx {
    pub out: PathBuf,
    pub seed: u64,
    pub cfg: RunConfig,
}

impl Ctx {
    fn create(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.out.join(name);
        let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(BufWriter::new(f))
    }
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn write_json<T: Serialize + ?Sized>(w: &mut impl Write, v: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn scenario(cfg: &RunConfig) -> Scenario {
    Scenario { id: cfg.scenario, error_family: cfg.error, n: cfg.n }
}

pub fn simulate(ctx: &Ctx) -> anyhow::Result<Vec<String>> {
    let sim = simulate_replicate(&scenario(&ctx.cfg), ctx.seed, ctx.cfg.rep)?;
    let mut w = ctx.create("data.csv")?;
    writeln!(w, "w,sigma,x_true")?;
    for i in 0..sim.data.len() {
        writeln!(
            w,
            "{},{},{}",
            fmt_num(sim.data.w()[i]),
            fmt_num(sim.data.sigma()[i]),
            fmt_num(sim.latent_x[i])
        )?;
    }
    w.flush()?;
    write_json(&mut ctx.create("scenario.json")?, &sim.scenario)?;
    Ok(vec!["data.csv".into(), "scenario.json".into()])
}

#[derive(Debug, Serialize)]
struct FitSummary {
    n: usize,
    chains: usize,
    draws_per_chain: usize,
    /// Per chain, per component.
    alpha_acceptance: Vec<Vec<f64>>,
    clamped_x: usize,
    runtime_secs: f64,
    /// Effective number of draws of `f(0)` from batch means; absent for short runs.
    ess_f0: Option<f64>,
    density_mass: f64,
}

/// Largest tail reach of the fit grid; tail points grow geometrically so this stays cheap.
const MAX_REACH: f64 = 1e8;

/// Grid for a fitted density: equispaced over the data range, then geometric tails
/// far enough out that every draw has less than 1e-4 of its mass beyond them.
fn fit_grid(cfg: &RunConfig, data: &Dataset, draws: &[MixtureParams]) -> Vec<f64> {
    let half = cfg
        .grid_half
        .unwrap_or_else(|| 1.2 * data.w().iter().fold(1.0f64, |m, w| m.max(w.abs())));
    let reach = draws
        .iter()
        .map(|d| LatentDensity::new(d).support_bound(1e-4))
        .fold(20.0 * half, f64::max)
        .min(MAX_REACH.max(20.0 * half));
    symmetric_grid(half, cfg.grid_points, reach)
}

fn effective_draws(draws: &[MixtureParams]) -> cbdecon::Result<Option<f64>> {
    let f0 = draws.iter().map(|d| eval_latent_density(d, 0.0)).collect::<cbdecon::Result<Vec<_>>>()?;
    let Ok(se) = batch_means_se(&f0, 20) else {
        return Ok(None);
    };
    let var = mean_var(&f0).1;
    Ok(Some(if se > 0.0 { (var / (se * se)).min(f0.len() as f64) } else { f0.len() as f64 }))
}

pub fn fit(ctx: &Ctx, data_path: &Path) -> anyhow::Result<Vec<String>> {
    let cfg = &ctx.cfg;
    let data = Dataset::from_csv(open(data_path)?)?;
    let chain_cfg = ChainConfig { seed: ctx.seed, ..cfg.chain.clone() };
    let start = Instant::now();
    let runs = run_chains(&data, cfg.error, &cfg.hp, &chain_cfg)?;
    let runtime_secs = start.elapsed().as_secs_f64();
    let mut outputs = Vec::new();

    for (c, run) in runs.iter().enumerate() {
        let name = if runs.len() == 1 { "draws.csv".to_string() } else { format!("draws_c{c}.csv") };
        let mut w = ctx.create(&name)?;
        run.write_csv(&mut w)?;
        w.flush()?;
        outputs.push(name);
    }

    let pooled: Vec<MixtureParams> = runs.iter().flat_map(|r| r.draws.iter().cloned()).collect();
    let grid = fit_grid(cfg, &data, &pooled);
    let est = DensityEstimate::new(grid.clone(), posterior_mean_values(&pooled, &grid)?)?;
    let mut w = ctx.create("density.csv")?;
    est.write_csv(&mut w)?;
    w.flush()?;
    outputs.push("density.csv".into());

    if cfg.chain.latent_thin.is_some() {
        write_latent(ctx, &runs, data.len())?;
        outputs.push("latent.csv".into());
    }

    let summary = FitSummary {
        n: data.len(),
        chains: runs.len(),
        draws_per_chain: runs.first().map_or(0, PosteriorDraws::len),
        alpha_acceptance: runs.iter().map(|r| r.meta.alpha_acceptance.clone()).collect(),
        clamped_x: runs.iter().map(|r| r.meta.clamped_x).sum(),
        runtime_secs,
        ess_f0: effective_draws(&pooled)?,
        density_mass: est.mass(),
    };
    write_json(&mut ctx.create("summary.json")?, &summary)?;
    outputs.push("summary.json".into());
    Ok(outputs)
}

/// One row per site, one column per latent snapshot (chains side by side).
/// The layout is the one `project --beta` reads.
fn write_latent(ctx: &Ctx, runs: &[PosteriorDraws], n: usize) -> anyhow::Result<()> {
    let snaps: Vec<&Vec<f64>> = runs.iter().flat_map(|r| r.latent_x.iter()).collect();
    if snaps.is_empty() {
        anyhow::bail!(cbdecon::Error::usage("latent_thin is set but no snapshots were kept"));
    }
    let mut w = ctx.create("latent.csv")?;
    let mut line = String::new();
    for i in 0..n {
        line.clear();
        for (j, s) in snaps.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&fmt_num(s[i]));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Sentinel accepted by `--estimate` for the exact truth of the scenario.
pub const TRUTH: &str = "truth";

pub fn metrics(ctx: &Ctx, estimates: &[PathBuf]) -> anyhow::Result<Vec<String>> {
    let cfg = &ctx.cfg;
    if estimates.is_empty() {
        anyhow::bail!(cbdecon::Error::usage("metrics needs at least one --estimate"));
    }
    let truth = cfg.scenario.truth();
    let threshold = cfg.threshold.or(cfg.scenario.exceedance_threshold());
    let grid = default_grid();
    let mut rows = Vec::new();
    for path in estimates {
        let (method, scores) = if path.as_os_str() == TRUTH {
            (TRUTH.to_string(), score(&truth, &truth, &grid, threshold)?)
        } else {
            let est = DensityEstimate::read_csv(open(path)?)
                .with_context(|| format!("reading {}", path.display()))?;
            let method = path.file_stem().map_or("estimate".into(), |s| s.to_string_lossy().into_owned());
            (method, score(&est, &truth, &grid, threshold)?)
        };
        rows.push(MetricRow { scenario: cfg.scenario.to_string(), n: cfg.n, rep: cfg.rep as usize, method, scores });
    }
    write_rows(ctx, "metrics.csv", &rows)?;
    Ok(vec!["metrics.csv".into()])
}

fn write_rows(ctx: &Ctx, name: &str, rows: &[MetricRow]) -> anyhow::Result<()> {
    let mut w = ctx.create(name)?;
    MetricRow::write_header(&mut w)?;
    for r in rows {
        r.write(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn project(ctx: &Ctx, beta: &Path, sigma: &Path) -> anyhow::Result<Vec<String>> {
    let cfg = &ctx.cfg;
    let pem = PosteriorEffectMatrix::from_csv(open(beta)?, open(sigma)?)?;
    let rows: Vec<Projection> = cfg
        .n_new
        .iter()
        .map(|&n| expected_discoveries(&pem, n, cfg.alpha_level))
        .collect::<cbdecon::Result<_>>()?;
    write_json(&mut ctx.create("projection.json")?, &rows)?;
    Ok(vec!["projection.json".into()])
}

pub const METHODS: [&str; 3] = ["cb", "naive_kde", "decon_kde"];

/// Fits the three estimators to replicate `rep` and scores them.
pub fn bench_replicate(cfg: &RunConfig, seed: u64, rep: u64) -> cbdecon::Result<Vec<MetricRow>> {
    let sim: Simulated = simulate_replicate(&scenario(cfg), seed, rep)?;
    let chain_cfg = ChainConfig { seed: seed.wrapping_add(rep), n_chains: 1, ..cfg.chain.clone() };
    let grid = extended_grid(BENCH_REACH);
    let draws = run_chain(&sim.data, cfg.error, &cfg.hp, &chain_cfg)?;
    let cb = DensityEstimate::new(grid.clone(), posterior_mean_values(&draws.draws, &grid)?)?;
    let naive = naive_kde(&sim.data, &KernelSpec::naive(), &grid)?.estimate;
    let mode = cfg.noise_mode.unwrap_or(noise_mode_of(cfg.scenario));
    let decon = decon_kde(&sim.data, cfg.error, &KernelSpec::decon(), mode, &grid)?.estimate;

    let score_grid = default_grid();
    let threshold = cfg.threshold.or(cfg.scenario.exceedance_threshold());
    let ests: [&dyn Density; 3] = [&cb, &naive, &decon];
    METHODS
        .iter()
        .zip(ests)
        .map(|(m, est)| {
            let scores: Scores = score(est, &sim.truth, &score_grid, threshold)?;
            Ok(MetricRow {
                scenario: cfg.scenario.to_string(),
                n: cfg.n,
                rep: rep as usize,
                method: m.to_string(),
                scores,
            })
        })
        .collect()
}

fn noise_mode_of(id: ScenarioId) -> NoiseMode {
    if id.is_heteroscedastic() {
        NoiseMode::Hetero
    } else {
        NoiseMode::Homo
    }
}

pub fn benchmark(ctx: &Ctx) -> anyhow::Result<Vec<String>> {
    let cfg = &ctx.cfg;
    let per_rep: Vec<Vec<MetricRow>> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|r| {
            log::info!("replicate {r}");
            bench_replicate(cfg, ctx.seed, r)
        })
        .collect::<cbdecon::Result<_>>()?;
    let rows: Vec<MetricRow> = per_rep.into_iter().flatten().collect();
    write_rows(ctx, "metrics.csv", &rows)?;

    let mut w = ctx.create("table.csv")?;
    writeln!(w, "{SUMMARY_HEADER}")?;
    for s in summarize(&rows) {
        s.write(&mut w)?;
    }
    w.flush()?;
    Ok(vec!["metrics.csv".into(), "table.csv".into()])
}
