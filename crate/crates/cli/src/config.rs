//! Run configuration read from TOML.
//!
//! Every section is optional and falls back to the defaults of the scalar
//! linear model used throughout the experiments. Unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use zakai_core::adaptive::AgaConfig;
use zakai_core::experiment::{FilterKind, MethodSpec};
use zakai_core::galerkin::MAX_BASIS_SIZE;
use zakai_core::model::{make_coupled_5d_model, make_decoupled_linear_model, make_linear_model};
use zakai_core::{BasisFamily, LinearModelParams, Method, ModelSpec};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub time: TimeSection,
    pub filter: FilterSection,
    pub pf: PfSection,
    pub rng: RngSection,
    pub output: OutputSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// `dim` independent copies of the scalar linear model
    Linear,
    /// the fixed five-dimensional coupled model
    Coupled5d,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub dim: usize,
    pub b: f64,
    pub sigma: f64,
    pub h: f64,
    pub lambda: f64,
    pub mu0: f64,
    pub var0: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = LinearModelParams::paper_defaults(5.5, 10.0);
        ModelSection {
            kind: ModelKind::Linear,
            dim: 1,
            b: p.b,
            sigma: p.sigma,
            h: p.h,
            lambda: p.lambda,
            mu0: p.mu0,
            var0: p.var0,
        }
    }
}

impl ModelSection {
    pub fn params(&self) -> LinearModelParams {
        LinearModelParams { b: self.b, sigma: self.sigma, h: self.h, lambda: self.lambda, mu0: self.mu0, var0: self.var0 }
    }

    pub fn build(&self) -> Result<ModelSpec> {
        let spec = match (self.kind, self.dim) {
            (ModelKind::Linear, 0) => bail!("model.dim must be at least 1"),
            (ModelKind::Linear, 1) => make_linear_model(&self.params())?,
            (ModelKind::Linear, d) => make_decoupled_linear_model(&self.params(), d)?,
            (ModelKind::Coupled5d, 1 | 5) => make_coupled_5d_model()?,
            (ModelKind::Coupled5d, d) => bail!("the coupled model is five-dimensional, got model.dim = {d}"),
        };
        Ok(spec)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSection {
    /// horizon `T`
    pub t_end: f64,
    pub dt: f64,
}

impl Default for TimeSection {
    fn default() -> Self {
        TimeSection { t_end: 0.5, dt: 1e-4 }
    }
}

impl TimeSection {
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            bail!("time.dt and time.t_end must be positive");
        }
        let steps = (self.t_end / self.dt).round() as usize;
        if steps == 0 || ((steps as f64) * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            bail!("time.t_end = {} is not a positive multiple of time.dt = {}", self.t_end, self.dt);
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Hermite,
    Gaussian,
}

impl From<FamilyName> for BasisFamily {
    fn from(f: FamilyName) -> Self {
        match f {
            FamilyName::Hermite => BasisFamily::Hermite,
            FamilyName::Gaussian => BasisFamily::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepperName {
    Su,
    Em,
}

impl From<StepperName> for Method {
    fn from(m: StepperName) -> Self {
        match m {
            StepperName::Su => Method::Su,
            StepperName::Em => Method::Em,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub family: FamilyName,
    pub n: usize,
    pub method: StepperName,
    pub adaptive: bool,
    pub threshold_mu: f64,
    pub threshold_sigma: f64,
    /// quadrature nodes for matrix assembly; chosen from `n` when absent
    pub quad_nodes: Option<usize>,
}

impl Default for FilterSection {
    fn default() -> Self {
        let aga = AgaConfig::default();
        FilterSection {
            family: FamilyName::Hermite,
            n: 12,
            method: StepperName::Su,
            adaptive: false,
            threshold_mu: aga.threshold_mu,
            threshold_sigma: aga.threshold_sigma,
            quad_nodes: None,
        }
    }
}

impl FilterSection {
    pub fn aga(&self) -> Result<AgaConfig> {
        let cfg = AgaConfig {
            threshold_mu: self.threshold_mu,
            threshold_sigma: self.threshold_sigma,
            ..AgaConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || (self.family == FamilyName::Hermite && self.n > MAX_BASIS_SIZE) {
            bail!("filter.n must lie in 1..={MAX_BASIS_SIZE} for Hermite bases, got {}", self.n);
        }
        if self.adaptive && self.family != FamilyName::Hermite {
            bail!("the adaptive filter needs filter.family = \"hermite\"");
        }
        self.aga()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfSection {
    pub particles: usize,
}

impl Default for PfSection {
    fn default() -> Self {
        PfSection { particles: 1000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RngSection {
    pub seed: u64,
}

impl Default for RngSection {
    fn default() -> Self {
        RngSection { seed: 1 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// number of simulated paths in benchmark runs
    pub paths: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { paths: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Galerkin,
    Tensor,
    Particle,
    Kalman,
}

/// One benchmark row.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchMethod {
    pub label: Option<String>,
    pub kind: MethodKind,
    #[serde(default)]
    pub family: Option<FamilyName>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub method: Option<StepperName>,
    #[serde(default)]
    pub adaptive: Option<bool>,
    #[serde(default)]
    pub particles: Option<usize>,
    /// fixed basis location `[mu, sigma]`
    #[serde(default)]
    pub location: Option<[f64; 2]>,
    #[serde(default)]
    pub coarsen: Option<usize>,
}

impl BenchMethod {
    /// Fills unset fields from the `[filter]` and `[pf]` sections.
    pub fn resolve(&self, cfg: &RunConfig) -> Result<MethodSpec> {
        let f = &cfg.filter;
        let method: Method = self.method.unwrap_or(f.method).into();
        let adaptive = if self.adaptive.unwrap_or(f.adaptive) { Some(f.aga()?) } else { None };
        let n = self.n.unwrap_or(f.n);
        let (kind, default_label) = match self.kind {
            MethodKind::Galerkin => {
                let family: BasisFamily = self.family.unwrap_or(f.family).into();
                let prefix = match (family, adaptive.is_some()) {
                    (BasisFamily::Hermite, true) => "AGAH",
                    (BasisFamily::Hermite, false) => "GAH",
                    (BasisFamily::Gaussian, _) => "GAG",
                };
                let kind = FilterKind::Galerkin {
                    family,
                    n,
                    method,
                    adaptive,
                    location: self.location.map(|[m, s]| (m, s)),
                };
                (kind, format!("{prefix}({method}) n={n}"))
            }
            MethodKind::Tensor => (
                FilterKind::Tensor { n_per_dim: n, method, adaptive: adaptive.clone() },
                format!("{}({method}) n={n}/axis", if adaptive.is_some() { "AGAH" } else { "GAH" }),
            ),
            MethodKind::Particle => {
                let particles = self.particles.unwrap_or(cfg.pf.particles);
                (FilterKind::Particle { n: particles }, format!("PF {particles}"))
            }
            MethodKind::Kalman => (FilterKind::KalmanBucy, "Kalman-Bucy".to_string()),
        };
        let spec = MethodSpec::new(self.label.clone().unwrap_or(default_label), kind);
        Ok(spec.coarsened(self.coarsen.unwrap_or(1)))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// rows of the benchmark table; the `[filter]` method and a particle
    /// filter when empty
    pub methods: Vec<BenchMethod>,
    /// filter against which EDM/EDV are measured
    pub reference: Option<BenchMethod>,
    /// grid points before this time are left out of the metrics
    pub burn_in: f64,
    /// basis sizes for the convergence sweep
    pub sizes: Vec<usize>,
    /// step multipliers for the stability sweep
    pub coarsen: Vec<usize>,
    /// worker threads; falls back to `ZAKAI_WORKERS`, then all cores
    pub workers: Option<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            methods: Vec::new(),
            reference: None,
            burn_in: 0.02,
            sizes: vec![4, 8, 12, 16, 20],
            coarsen: vec![1, 10, 100],
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    /// Range checks that do not need a built model.
    pub fn validate(&self) -> Result<()> {
        self.time.steps()?;
        self.filter.validate()?;
        if self.pf.particles < 2 {
            bail!("pf.particles must be at least 2");
        }
        if self.output.paths == 0 {
            bail!("output.paths must be positive");
        }
        if self.bench.sizes.contains(&0) {
            bail!("bench.sizes must be positive");
        }
        if self.bench.coarsen.contains(&0) {
            bail!("bench.coarsen factors must be positive");
        }
        if self.bench.workers == Some(0) {
            bail!("bench.workers must be positive");
        }
        Ok(())
    }
}
