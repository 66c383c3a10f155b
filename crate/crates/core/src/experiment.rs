//! Repeated-path experiments: RMSE against the true signal, EDM/EDV against
//! a reference filter, jackknife standard errors and wall times.
//!
//! All methods in one experiment see the same simulated observations for a
//! given path index (common random numbers); path `j` uses seed
//! `master_seed + j`.

use rayon::prelude::*;
use std::io::Write;
use std::time::Instant;

use crate::adaptive::{run_aga_with, AgaConfig};
use crate::error::{Error, Result};
use crate::galerkin::{gaussian_coefficients, FilterEstimate, FilterOptions, FixedFilter, Method};
use crate::hermite::{BasisFamily, BasisSpec};
use crate::model::{fmt_f64, simulate_bundle, ModelSpec, PathBundle};
use crate::multidim::{initial_tensor_basis, run_aga_md, run_filter_md};
use crate::reference::{kalman_bucy, particle_filter};

/// Per-path sequence of estimates (one vector per grid point).
pub type Series = Vec<Vec<f64>>;

fn check_shapes(a: &[Series], b: &[Series]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::ShapeMismatch("estimate and reference sequences differ in shape".into()));
    }
    if a.iter().zip(b).any(|(x, y)| x.iter().zip(y).any(|(u, v)| u.len() != v.len())) {
        return Err(Error::ShapeMismatch("estimate and reference points differ in dimension".into()));
    }
    Ok(())
}

/// Per-path sums of squared Euclidean distances.
fn path_sums(a: &[Series], b: &[Series]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
                .sum()
        })
        .collect()
}

fn count(a: &[Series]) -> usize {
    a.iter().map(|s| s.len()).sum()
}

/// `(1/(mK) Σ_j Σ_k |X^j(t_k) − x̂^j(t_k)|²)^{1/2}`.
pub fn rmse(estimates: &[Series], truths: &[Series]) -> Result<f64> {
    check_shapes(estimates, truths)?;
    let n = count(estimates);
    if n == 0 {
        return Err(Error::ShapeMismatch("no points to compare".into()));
    }
    Ok((path_sums(estimates, truths).iter().sum::<f64>() / n as f64).sqrt())
}

/// Mean squared deviations of means and variances from a reference filter.
pub fn edm_edv(
    estimates: &[Series],
    reference_estimates: &[Series],
    variances: &[Series],
    reference_variances: &[Series],
) -> Result<(f64, f64)> {
    check_shapes(estimates, reference_estimates)?;
    check_shapes(variances, reference_variances)?;
    let n = count(estimates);
    if n == 0 || count(variances) != n {
        return Err(Error::ShapeMismatch("no points to compare".into()));
    }
    let edm = path_sums(estimates, reference_estimates).iter().sum::<f64>() / n as f64;
    let edv = path_sums(variances, reference_variances).iter().sum::<f64>() / count(variances) as f64;
    Ok((edm, edv))
}

/// Leave-one-path-out jackknife of `f(Σ sums / Σ counts)`.
fn jackknife<F: Fn(f64) -> f64>(sums: &[f64], counts: &[usize], f: F) -> (f64, f64) {
    let total: f64 = sums.iter().sum();
    let n: usize = counts.iter().sum();
    let full = f(total / n as f64);
    let m = sums.len();
    if m < 2 {
        return (full, f64::NAN);
    }
    let loo: Vec<f64> = sums
        .iter()
        .zip(counts)
        .map(|(s, c)| f((total - s) / (n - c) as f64))
        .collect();
    let mean = loo.iter().sum::<f64>() / m as f64;
    let var = loo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * (m - 1) as f64 / m as f64;
    (full, var.sqrt())
}

/// Jackknife standard error of the RMSE over paths.
pub fn rmse_jackknife(estimates: &[Series], truths: &[Series]) -> Result<(f64, f64)> {
    check_shapes(estimates, truths)?;
    let counts: Vec<usize> = estimates.iter().map(|s| s.len()).collect();
    Ok(jackknife(&path_sums(estimates, truths), &counts, f64::sqrt))
}

/// Jackknife standard error of a mean squared deviation over paths.
pub fn msd_jackknife(estimates: &[Series], reference: &[Series]) -> Result<(f64, f64)> {
    check_shapes(estimates, reference)?;
    let counts: Vec<usize> = estimates.iter().map(|s| s.len()).collect();
    Ok(jackknife(&path_sums(estimates, reference), &counts, |v| v))
}

/// The filters an experiment can run.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterKind {
    /// One-dimensional Galerkin filter. `location = None` places the basis at
    /// the initial law; `adaptive` enables relocation (Hermite only).
    Galerkin {
        family: BasisFamily,
        n: usize,
        method: Method,
        adaptive: Option<AgaConfig>,
        location: Option<(f64, f64)>,
    },
    /// Tensor Hermite filter located at the initial law.
    Tensor { n_per_dim: usize, method: Method, adaptive: Option<AgaConfig> },
    Particle { n: usize },
    /// Only for the scalar linear model without jumps.
    KalmanBucy,
}

/// A labelled filter, optionally run on observations aggregated over
/// `coarsen` consecutive steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub label: String,
    pub kind: FilterKind,
    pub coarsen: usize,
}

impl MethodSpec {
    pub fn new(label: impl Into<String>, kind: FilterKind) -> Self {
        MethodSpec { label: label.into(), kind, coarsen: 1 }
    }

    pub fn coarsened(mut self, factor: usize) -> Self {
        self.coarsen = factor;
        self
    }

    /// Basis size or particle count.
    pub fn size(&self) -> usize {
        match &self.kind {
            FilterKind::Galerkin { n, .. } => *n,
            FilterKind::Tensor { n_per_dim, .. } => *n_per_dim,
            FilterKind::Particle { n } => *n,
            FilterKind::KalmanBucy => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.coarsen == 0 {
            return Err(Error::InvalidArgument(format!("{}: coarsening factor must be positive", self.label)));
        }
        match &self.kind {
            FilterKind::Galerkin { adaptive: Some(cfg), .. } | FilterKind::Tensor { adaptive: Some(cfg), .. } => {
                cfg.validate()
            }
            FilterKind::Particle { n } if *n < 2 => {
                Err(Error::InvalidArgument(format!("{}: at least two particles are needed", self.label)))
            }
            _ => Ok(()),
        }
    }
}

/// Filter output for one path together with the timing of the filtering loop.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub estimates: Vec<FilterEstimate>,
    pub seconds: f64,
}

/// Runs one method on one path. Matrix assembly of fixed-basis filters is
/// excluded from the timing; reassembly inside the adaptive filter is part of
/// the algorithm and is included.
pub fn run_method(spec: &ModelSpec, method: &MethodSpec, bundle: &PathBundle, seed: u64) -> Result<FilterRun> {
    let opts = FilterOptions::default();
    let timed = |f: &dyn Fn() -> Result<Vec<FilterEstimate>>| -> Result<FilterRun> {
        let start = Instant::now();
        let estimates = f()?;
        Ok(FilterRun { estimates, seconds: start.elapsed().as_secs_f64() })
    };
    match &method.kind {
        FilterKind::Galerkin { family, n, method: m, adaptive, location } => {
            if spec.dim_x != 1 {
                return Err(Error::InvalidArgument("the one-dimensional Galerkin filter needs d = 1".into()));
            }
            let (mu, sigma) = location.unwrap_or((spec.mu0[0], spec.cov0[(0, 0)].sqrt()));
            let basis = BasisSpec::new(*family, *n, mu, sigma)?;
            match adaptive {
                Some(cfg) => timed(&|| run_aga_with(spec, &basis, *m, bundle, cfg, &opts)),
                None => {
                    let q0 = gaussian_coefficients(&basis, spec.mu0[0], spec.cov0[(0, 0)])?;
                    let filter = FixedFilter::new(spec, &basis, *m, bundle.dt, &opts)?;
                    timed(&|| filter.run(bundle, &q0))
                }
            }
        }
        FilterKind::Tensor { n_per_dim, method: m, adaptive } => {
            let basis = initial_tensor_basis(spec, *n_per_dim)?;
            match adaptive {
                Some(cfg) => timed(&|| run_aga_md(spec, &basis, *m, bundle, cfg, &opts)),
                None => timed(&|| run_filter_md(spec, &basis, *m, bundle)),
            }
        }
        FilterKind::Particle { n } => timed(&|| particle_filter(spec, bundle, *n, seed)),
        FilterKind::KalmanBucy => {
            let p = spec
                .linear()
                .filter(|p| !p.point_process_enabled())
                .ok_or_else(|| Error::InvalidArgument("Kalman–Bucy needs the linear model without jumps".into()))?;
            timed(&|| {
                let (m, v) = kalman_bucy(p, bundle)?;
                Ok(m.iter()
                    .zip(&v)
                    .zip(&bundle.times)
                    .map(|((m, v), t)| FilterEstimate {
                        t: *t,
                        mean: vec![*m],
                        variance: vec![*v],
                        log_scale: 0.0,
                        neg_mass_fraction: 0.0,
                        rebased: false,
                        mu_basis: vec![f64::NAN],
                        sigma_basis: vec![f64::NAN],
                    })
                    .collect())
            })
        }
    }
}

/// Experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dt: f64,
    pub t_end: f64,
    pub paths: usize,
    pub master_seed: u64,
    /// grid points with `t < burn_in` are left out of all metrics
    pub burn_in: f64,
    pub methods: Vec<MethodSpec>,
    /// filter against which EDM/EDV are measured
    pub reference: Option<MethodSpec>,
    /// worker threads; `None` reads `ZAKAI_WORKERS` or uses all cores
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_end > 0.0) || self.steps() == 0 {
            return Err(Error::InvalidArgument(format!(
                "need dt > 0 and T > 0 with at least one step (dt = {}, T = {})",
                self.dt, self.t_end
            )));
        }
        if ((self.steps() as f64) * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(Error::InvalidArgument(format!("T = {} is not a multiple of dt = {}", self.t_end, self.dt)));
        }
        if self.paths == 0 {
            return Err(Error::InvalidArgument("at least one path is required".into()));
        }
        if !(self.burn_in >= 0.0) || self.burn_in >= self.t_end {
            return Err(Error::InvalidArgument("burn-in must lie in [0, T)".into()));
        }
        for m in self.methods.iter().chain(self.reference.iter()) {
            m.validate()?;
            if self.steps() % m.coarsen != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{}: {} steps cannot be coarsened by {}",
                    m.label,
                    self.steps(),
                    m.coarsen
                )));
            }
        }
        Ok(())
    }
}

/// One row of the experiment table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub label: String,
    /// basis size or particle count
    pub size: usize,
    /// filtering time summed over the successful paths, seconds
    pub wall_time: f64,
    pub rmse: f64,
    pub rmse_se: f64,
    pub edm: f64,
    pub edm_se: f64,
    pub edv: f64,
    pub edv_se: f64,
    pub paths: usize,
    /// grid points per path entering the metrics
    pub steps: usize,
    /// paths on which the method failed numerically
    pub failed: usize,
    /// first failure, if any
    pub error: Option<String>,
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<ExperimentReport>,
    /// SHA-256 of the observation bundle per path index
    pub bundle_hashes: Vec<String>,
    /// `runs[method][path]`
    pub runs: Vec<Vec<std::result::Result<FilterRun, Error>>>,
    pub bundles: Vec<PathBundle>,
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let workers = workers
        .or_else(|| std::env::var("ZAKAI_WORKERS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

/// Simulates the paths and runs every method (and the reference) on each.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let steps = cfg.steps();
    let all: Vec<&MethodSpec> = cfg.methods.iter().chain(cfg.reference.iter()).collect();

    type PathOut = (PathBundle, Vec<std::result::Result<FilterRun, Error>>);
    let per_path: Vec<Result<PathOut>> = pool(cfg.workers)?.install(|| {
        (0..cfg.paths)
            .into_par_iter()
            .map(|j| {
                let seed = cfg.master_seed.wrapping_add(j as u64);
                let bundle = simulate_bundle(&cfg.model, cfg.dt, steps, seed)?;
                let runs = all
                    .iter()
                    .map(|m| {
                        let coarse;
                        let b = if m.coarsen > 1 {
                            coarse = bundle.coarsen(m.coarsen)?;
                            &coarse
                        } else {
                            &bundle
                        };
                        match run_method(&cfg.model, m, b, seed) {
                            Err(e) if !e.is_numerical() => Err(e),
                            other => Ok(other),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((bundle, runs))
            })
            .collect()
    });
    let per_path: Vec<PathOut> = per_path.into_iter().collect::<Result<_>>()?;
    let (bundles, path_runs): (Vec<_>, Vec<_>) = per_path.into_iter().unzip();
    let bundle_hashes = bundles.iter().map(|b| b.digest()).collect();

    // transpose to runs[method][path]
    let mut runs: Vec<Vec<std::result::Result<FilterRun, Error>>> = all.iter().map(|_| Vec::new()).collect();
    for pr in path_runs {
        for (m, r) in pr.into_iter().enumerate() {
            runs[m].push(r);
        }
    }

    let reference_index = cfg.reference.as_ref().map(|_| all.len() - 1);
    let reports = all
        .iter()
        .enumerate()
        .map(|(mi, m)| report_for(cfg, m, &runs[mi], reference_index.map(|r| (&runs[r], all[r].coarsen)), &bundles))
        .collect();
    Ok(ExperimentResult { reports, bundle_hashes, runs, bundles })
}

/// Grid indices of a run on observations coarsened by `factor` that enter the metrics.
fn metric_indices(len: usize, dt: f64, burn_in: f64) -> Vec<usize> {
    (1..len).filter(|&k| k as f64 * dt >= burn_in - 1e-12).collect()
}

fn report_for(
    cfg: &ExperimentConfig,
    method: &MethodSpec,
    runs: &[std::result::Result<FilterRun, Error>],
    reference: Option<(&Vec<std::result::Result<FilterRun, Error>>, usize)>,
    bundles: &[PathBundle],
) -> ExperimentReport {
    let dt = cfg.dt * method.coarsen as f64;
    let mut est = Vec::new();
    let mut truth = Vec::new();
    let mut ref_means = Vec::new();
    let mut ref_vars = Vec::new();
    let mut vars = Vec::new();
    let mut ref_est = Vec::new();
    let mut wall = 0.0;
    let mut failed = 0;
    let mut error = None;
    let mut steps = 0;
    for (j, r) in runs.iter().enumerate() {
        match r {
            Err(e) => {
                failed += 1;
                error.get_or_insert_with(|| e.to_string());
            }
            Ok(run) => {
                wall += run.seconds;
                let idx = metric_indices(run.estimates.len(), dt, cfg.burn_in);
                steps = idx.len();
                est.push(idx.iter().map(|&k| run.estimates[k].mean.clone()).collect::<Series>());
                truth.push(idx.iter().map(|&k| bundles[j].x_path[k * method.coarsen].clone()).collect::<Series>());
                if let Some((rruns, rc)) = reference {
                    if let Ok(rr) = &rruns[j] {
                        // compare on the coarser of the two grids
                        let ratio = rc.max(method.coarsen);
                        let keep: Vec<usize> =
                            idx.iter().copied().filter(|k| (k * method.coarsen) % ratio == 0).collect();
                        ref_est.push(keep.iter().map(|&k| run.estimates[k].mean.clone()).collect::<Series>());
                        vars.push(keep.iter().map(|&k| run.estimates[k].variance.clone()).collect::<Series>());
                        ref_means.push(
                            keep.iter().map(|&k| rr.estimates[k * method.coarsen / rc].mean.clone()).collect::<Series>(),
                        );
                        ref_vars.push(
                            keep.iter()
                                .map(|&k| rr.estimates[k * method.coarsen / rc].variance.clone())
                                .collect::<Series>(),
                        );
                    }
                }
            }
        }
    }
    let (rmse, rmse_se) = if est.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        rmse_jackknife(&est, &truth).unwrap_or((f64::NAN, f64::NAN))
    };
    let (edm, edm_se, edv, edv_se) = if ref_est.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let (edm, edm_se) = msd_jackknife(&ref_est, &ref_means).unwrap_or((f64::NAN, f64::NAN));
        let (edv, edv_se) = msd_jackknife(&vars, &ref_vars).unwrap_or((f64::NAN, f64::NAN));
        (edm, edm_se, edv, edv_se)
    };
    ExperimentReport {
        label: method.label.clone(),
        size: method.size(),
        wall_time: wall,
        rmse,
        rmse_se,
        edm,
        edm_se,
        edv,
        edv_se,
        paths: runs.len() - failed,
        steps,
        failed,
        error,
    }
}

const REPORT_HEADER: [&str; 13] = [
    "label", "size", "wall_time", "rmse", "rmse_se", "edm", "edm_se", "edv", "edv_se", "paths", "steps", "failed",
    "error",
];

/// Writes reports as CSV with one row per method.
pub fn write_reports_csv<W: Write>(reports: &[ExperimentReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(REPORT_HEADER).map_err(err)?;
    for r in reports {
        w.write_record([
            r.label.clone(),
            r.size.to_string(),
            fmt_f64(r.wall_time),
            fmt_f64(r.rmse),
            fmt_f64(r.rmse_se),
            fmt_f64(r.edm),
            fmt_f64(r.edm_se),
            fmt_f64(r.edv),
            fmt_f64(r.edv_se),
            r.paths.to_string(),
            r.steps.to_string(),
            r.failed.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))
}

/// Human-readable table of reports.
pub fn format_reports(reports: &[ExperimentReport]) -> String {
    let mut s = format!(
        "{:<24} {:>6} {:>10} {:>10} {:>9} {:>10} {:>10} {:>6} {:>6}\n",
        "method", "size", "time[s]", "rmse", "±se", "edm", "edv", "paths", "failed"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<24} {:>6} {:>10.3} {:>10.4} {:>9.4} {:>10.2e} {:>10.2e} {:>6} {:>6}\n",
            r.label, r.size, r.wall_time, r.rmse, r.rmse_se, r.edm, r.edv, r.paths, r.failed
        ));
    }
    s
}
