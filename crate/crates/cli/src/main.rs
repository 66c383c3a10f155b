//! `zakai`: simulate paths, run filters and benchmark them from the command line.
//!
//! Exit status is 0 on success, 1 for invalid input or usage and 2 when a
//! filter diverges numerically.

mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{BenchMethod, MethodKind, RunConfig, StepperName};
use zakai_core::adaptive::run_aga_with;
use zakai_core::experiment::{
    format_reports, run_experiment, write_reports_csv, ExperimentConfig, MethodSpec,
};
use zakai_core::galerkin::{gaussian_coefficients, run_filter_with, write_estimates_csv, FilterOptions};
use zakai_core::model::simulate_bundle;
use zakai_core::multidim::{initial_tensor_basis, run_aga_md, run_filter_md};
use zakai_core::reference::{kalman_bucy, particle_filter};
use zakai_core::{BasisSpec, FilterEstimate, Method, ModelSpec, PathBundle};

const CONFIG_HELP: &str = "\
Configuration is TOML; every section and key is optional and unknown keys are errors.

  [model]   kind = \"linear\" | \"coupled5d\", dim, b, sigma, h, lambda, mu0, var0
  [time]    t_end, dt
  [filter]  family = \"hermite\" | \"gaussian\", n, method = \"su\" | \"em\", adaptive,
            threshold_mu, threshold_sigma, quad_nodes
  [pf]      particles
  [rng]     seed
  [output]  paths
  [bench]   methods = [{ kind = \"galerkin\" | \"tensor\" | \"particle\" | \"kalman\", label, family,
            n, method, adaptive, particles, location = [mu, sigma], coarsen }], reference,
            burn_in, sizes, coarsen, workers

Numbers may be written in decimal or scientific notation (1e-4).
The worker count for benchmarks falls back to the ZAKAI_WORKERS environment variable.";

#[derive(Parser, Debug)]
#[command(name = "zakai", version, about = "Galerkin filters for the Zakai equation", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a signal path with its observations and write it as CSV.
    Simulate(Common),
    /// Run one filter over a path and write the estimates as CSV.
    Filter(FilterArgs),
    /// Run every configured method over common simulated paths.
    Benchmark(Common),
    /// Sweep the basis size of the configured filter.
    Convergence(Common),
    /// Sweep the time step for both steppers.
    Stability(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// output file; standard output when absent
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FilterMethod {
    Su,
    Em,
    /// bootstrap particle filter
    Pf,
    /// Kalman–Bucy (scalar linear model without jumps)
    Kb,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[command(flatten)]
    common: Common,
    /// path CSV written by `simulate`; simulated from the seed when absent
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<FilterMethod>,
    /// relocate the basis along the path
    #[arg(long)]
    adaptive: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| c.downcast_ref::<zakai_core::Error>().is_some_and(|z| z.is_numerical()));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => simulate(&c),
        Command::Filter(f) => filter(&f),
        Command::Benchmark(c) => benchmark(&c),
        Command::Convergence(c) => convergence(&c),
        Command::Stability(c) => stability(&c),
    }
}

/// Loads the configuration and applies command-line overrides.
fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.rng.seed = seed;
    }
    if let Some(dt) = c.dt {
        cfg.time.dt = dt;
    }
    if let Some(paths) = c.paths {
        cfg.output.paths = paths;
    }
    if let Some(n) = c.n {
        cfg.filter.n = n;
    }
    if let Some(p) = c.particles {
        cfg.pf.particles = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn simulate(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let spec = cfg.model.build()?;
    let bundle = simulate_bundle(&spec, cfg.time.dt, cfg.time.steps()?, cfg.rng.seed)?;
    bundle.write_csv(output(c.out.as_deref())?)?;
    Ok(())
}

fn read_bundle(path: &Path, spec: &ModelSpec) -> Result<PathBundle> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let bundle = PathBundle::read_csv(BufReader::new(file)).with_context(|| format!("in {}", path.display()))?;
    if bundle.dim_x() != spec.dim_x || bundle.dim_z() != spec.dim_z {
        bail!(
            "{} has {} state and {} observation columns; the model needs {} and {}",
            path.display(),
            bundle.dim_x(),
            bundle.dim_z(),
            spec.dim_x,
            spec.dim_z
        );
    }
    Ok(bundle)
}

fn filter(f: &FilterArgs) -> Result<()> {
    let mut cfg = load(&f.common)?;
    if f.adaptive {
        cfg.filter.adaptive = true;
    }
    let method = f.method.unwrap_or(match cfg.filter.method {
        StepperName::Su => FilterMethod::Su,
        StepperName::Em => FilterMethod::Em,
    });
    cfg.validate()?;
    let spec = cfg.model.build()?;
    let bundle = match &f.input {
        Some(p) => read_bundle(p, &spec)?,
        None => simulate_bundle(&spec, cfg.time.dt, cfg.time.steps()?, cfg.rng.seed)?,
    };
    let estimates = match method {
        FilterMethod::Su => galerkin(&cfg, &spec, Method::Su, &bundle)?,
        FilterMethod::Em => galerkin(&cfg, &spec, Method::Em, &bundle)?,
        FilterMethod::Pf => particle_filter(&spec, &bundle, cfg.pf.particles, cfg.rng.seed)?,
        FilterMethod::Kb => {
            let p = spec
                .linear()
                .filter(|p| !p.point_process_enabled())
                .context("the Kalman–Bucy filter needs the scalar linear model with lambda = 0")?;
            let (m, v) = kalman_bucy(p, &bundle)?;
            bundle
                .times
                .iter()
                .zip(m.iter().zip(&v))
                .map(|(t, (m, v))| FilterEstimate {
                    t: *t,
                    mean: vec![*m],
                    variance: vec![*v],
                    log_scale: 0.0,
                    neg_mass_fraction: f64::NAN,
                    rebased: false,
                    mu_basis: vec![f64::NAN],
                    sigma_basis: vec![f64::NAN],
                })
                .collect()
        }
    };
    write_estimates_csv(&estimates, output(f.common.out.as_deref())?)?;
    Ok(())
}

fn galerkin(cfg: &RunConfig, spec: &ModelSpec, method: Method, bundle: &PathBundle) -> Result<Vec<FilterEstimate>> {
    let f = &cfg.filter;
    let opts = FilterOptions { quad_nodes: f.quad_nodes, ..FilterOptions::default() };
    let aga = f.adaptive.then(|| f.aga()).transpose()?;
    if spec.dim_x > 1 {
        let basis = initial_tensor_basis(spec, f.n)?;
        return Ok(match aga {
            Some(a) => run_aga_md(spec, &basis, method, bundle, &a, &opts)?,
            None => run_filter_md(spec, &basis, method, bundle)?,
        });
    }
    let basis = BasisSpec::new(f.family.into(), f.n, spec.mu0[0], spec.cov0[(0, 0)].sqrt())?;
    Ok(match aga {
        Some(a) => run_aga_with(spec, &basis, method, bundle, &a, &opts)?,
        None => {
            let q0 = gaussian_coefficients(&basis, spec.mu0[0], spec.cov0[(0, 0)])?;
            run_filter_with(spec, &basis, method, bundle, &q0, &opts)?
        }
    })
}

fn experiment(cfg: &RunConfig, spec: ModelSpec, methods: Vec<MethodSpec>) -> Result<ExperimentConfig> {
    let reference = cfg.bench.reference.as_ref().map(|r| r.resolve(cfg)).transpose()?;
    Ok(ExperimentConfig {
        model: spec,
        dt: cfg.time.dt,
        t_end: cfg.time.t_end,
        paths: cfg.output.paths,
        master_seed: cfg.rng.seed,
        burn_in: cfg.bench.burn_in,
        methods,
        reference,
        workers: cfg.bench.workers,
    })
}

/// A benchmark row of the given kind with every setting taken from the config.
fn row(kind: MethodKind) -> BenchMethod {
    BenchMethod {
        label: None,
        kind,
        family: None,
        n: None,
        method: None,
        adaptive: None,
        particles: None,
        location: None,
        coarsen: None,
    }
}

/// The configured filter: tensor for `d > 1`.
fn configured_row(spec: &ModelSpec) -> BenchMethod {
    row(if spec.dim_x > 1 { MethodKind::Tensor } else { MethodKind::Galerkin })
}

fn report(cfg: ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let result = run_experiment(&cfg)?;
    print!("{}", format_reports(&result.reports));
    if let Some(path) = out {
        write_reports_csv(&result.reports, output(Some(path))?)?;
    }
    Ok(())
}

fn benchmark(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let spec = cfg.model.build()?;
    let rows = if cfg.bench.methods.is_empty() {
        vec![configured_row(&spec), row(MethodKind::Particle)]
    } else {
        cfg.bench.methods.clone()
    };
    let methods = rows.iter().map(|r| r.resolve(&cfg)).collect::<Result<Vec<_>>>()?;
    report(experiment(&cfg, spec, methods)?, c.out.as_deref())
}

fn convergence(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let spec = cfg.model.build()?;
    let base = configured_row(&spec);
    let methods = cfg
        .bench
        .sizes
        .iter()
        .map(|&n| BenchMethod { n: Some(n), ..base.clone() }.resolve(&cfg))
        .collect::<Result<Vec<_>>>()?;
    report(experiment(&cfg, spec, methods)?, c.out.as_deref())
}

fn stability(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let spec = cfg.model.build()?;
    let base = configured_row(&spec);
    let mut methods = Vec::new();
    for &factor in &cfg.bench.coarsen {
        for stepper in [StepperName::Su, StepperName::Em] {
            let mut m = BenchMethod { method: Some(stepper), coarsen: Some(factor), ..base.clone() }.resolve(&cfg)?;
            m.label = format!("{} dt={:e}", m.label, cfg.time.dt * factor as f64);
            methods.push(m);
        }
    }
    report(experiment(&cfg, spec, methods)?, c.out.as_deref())
}
