mod commands;
mod config;
mod meta;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cbdecon::model::ErrorKernel;
use cbdecon::simgen::ScenarioId;
use commands::Ctx;
use config::{parse_override, parse_pairs, RunConfig};
use meta::RunMeta;

#[derive(Debug, Parser)]
#[command(name = "cbdecon", version, about = "Bayesian density deconvolution with a Dirichlet mixture of Gammas")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override any config key, applied last. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: Option<ScenarioId>,
    #[arg(long)]
    n: Option<usize>,
    /// Noise family: normal or laplace.
    #[arg(long)]
    error: Option<ErrorKernel>,
}

#[derive(Debug, Args)]
struct ChainArgs {
    #[arg(long)]
    n_iter: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Draw a synthetic data set: data.csv (w,sigma,x_true) and scenario.json.
    Simulate {
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long)]
        rep: Option<u64>,
    },
    /// Run the sampler on a `w,sigma` CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        error: Option<ErrorKernel>,
        #[command(flatten)]
        chain: ChainArgs,
        /// Keep latent snapshots every this many sweeps (latent.csv).
        #[arg(long)]
        latent_thin: Option<usize>,
    },
    /// Score density CSVs against a scenario truth.
    Metrics {
        #[arg(long)]
        scenario: Option<ScenarioId>,
        /// Density CSV (x,density); `truth` scores the exact truth. Repeatable.
        #[arg(long = "estimate", required = true)]
        estimates: Vec<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        rep: Option<u64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Expected discoveries in a larger study.
    Project {
        /// Headerless matrix, one SNP per row, one posterior draw per column.
        #[arg(long)]
        beta: PathBuf,
        /// CSV with a `sigma` column, one row per SNP.
        #[arg(long)]
        sigma: PathBuf,
        /// Comma-separated sample sizes.
        #[arg(long, value_delimiter = ',')]
        n_new: Option<Vec<u64>>,
        #[arg(long)]
        alpha_level: Option<f64>,
    },
    /// Simulate replicates, fit all estimators, score and tabulate.
    Benchmark {
        #[command(flatten)]
        scn: ScenarioArgs,
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        chain: ChainArgs,
    },
}

fn flag<T: ToString>(pairs: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        pairs.push((key.to_string(), v.to_string()));
    }
}

impl ScenarioArgs {
    fn pairs(&self, out: &mut Vec<(String, String)>) {
        flag(out, "scenario", &self.scenario);
        flag(out, "n", &self.n);
        flag(out, "error", &self.error.map(error_name));
    }
}

impl ChainArgs {
    fn pairs(&self, out: &mut Vec<(String, String)>) {
        flag(out, "n_iter", &self.n_iter);
        flag(out, "burn_in", &self.burn_in);
        flag(out, "thin", &self.thin);
        flag(out, "n_chains", &self.chains);
    }
}

fn error_name(e: ErrorKernel) -> &'static str {
    match e {
        ErrorKernel::Normal => "normal",
        ErrorKernel::Laplace => "laplace",
    }
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Simulate { .. } => "simulate",
            Cmd::Fit { .. } => "fit",
            Cmd::Metrics { .. } => "metrics",
            Cmd::Project { .. } => "project",
            Cmd::Benchmark { .. } => "benchmark",
        }
    }

    /// Subcommand flags as config pairs.
    fn pairs(&self) -> Vec<(String, String)> {
        let mut p = Vec::new();
        match self {
            Cmd::Simulate { scn, rep } => {
                scn.pairs(&mut p);
                flag(&mut p, "rep", rep);
            }
            Cmd::Fit { error, chain, latent_thin, .. } => {
                flag(&mut p, "error", &error.map(error_name));
                chain.pairs(&mut p);
                flag(&mut p, "latent_thin", latent_thin);
            }
            Cmd::Metrics { scenario, n, rep, threshold, .. } => {
                flag(&mut p, "scenario", scenario);
                flag(&mut p, "n", n);
                flag(&mut p, "rep", rep);
                flag(&mut p, "threshold", threshold);
            }
            Cmd::Project { n_new, alpha_level, .. } => {
                if let Some(v) = n_new {
                    let s: Vec<String> = v.iter().map(u64::to_string).collect();
                    p.push(("n_new".into(), s.join(",")));
                }
                flag(&mut p, "alpha_level", alpha_level);
            }
            Cmd::Benchmark { scn, reps, chain } => {
                scn.pairs(&mut p);
                flag(&mut p, "reps", reps);
                chain.pairs(&mut p);
            }
        }
        p
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        cfg.apply(&parse_pairs(&text)?).with_context(|| format!("in {}", path.display()))?;
    }
    cfg.apply(&cli.cmd.pairs())?;
    let overrides = cli.set.iter().map(|s| parse_override(s)).collect::<cbdecon::Result<Vec<_>>>()?;
    cfg.apply(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            anyhow::bail!(cbdecon::Error::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    let ctx = Ctx { out: cli.out.clone(), seed: cli.seed, cfg };
    let outputs = match &cli.cmd {
        Cmd::Simulate { .. } => commands::simulate(&ctx)?,
        Cmd::Fit { data, .. } => commands::fit(&ctx, data)?,
        Cmd::Metrics { estimates, .. } => commands::metrics(&ctx, estimates)?,
        Cmd::Project { beta, sigma, .. } => commands::project(&ctx, beta, sigma)?,
        Cmd::Benchmark { .. } => commands::benchmark(&ctx)?,
    };
    RunMeta::new(cli.cmd.name(), cli.seed, &ctx.cfg, outputs).write(&cli.out)
}

/// 3 for numerical failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<cbdecon::Error>()) {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
