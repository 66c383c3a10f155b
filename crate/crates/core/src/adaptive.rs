//! Adaptive relocation of the Hermite basis.
//!
//! After every step the conditional mean and standard deviation are compared
//! with the basis location and scale; when either has drifted past its
//! threshold the coefficients are re-projected onto a basis centered at the
//! current estimates and the matrices are reassembled.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::galerkin::{initial_coefficients, FilterEstimate, FilterOptions, FilterState, Method};
use crate::hermite::{BasisFamily, BasisSpec};
use crate::model::{ModelSpec, PathBundle};
use crate::multidim::{apply_axis, run_driver_md, TensorBasisSpec};
use crate::numerics::{gauss_hermite, QuadratureRule};

/// Rebase thresholds and limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgaConfig {
    /// allowed drift of the mean, in units of the basis scale
    pub threshold_mu: f64,
    /// allowed relative drift of the standard deviation
    pub threshold_sigma: f64,
    pub max_rebases: usize,
    pub projection_rule_nodes: usize,
}

impl Default for AgaConfig {
    fn default() -> Self {
        AgaConfig { threshold_mu: 0.25, threshold_sigma: 0.25, max_rebases: 1_000_000, projection_rule_nodes: 200 }
    }
}

impl AgaConfig {
    /// Thresholds that never trigger a rebase.
    pub fn never() -> Self {
        AgaConfig { threshold_mu: f64::INFINITY, threshold_sigma: f64::INFINITY, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_mu > 0.0) || !(self.threshold_sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rebase thresholds must be positive, got {} and {}",
                self.threshold_mu, self.threshold_sigma
            )));
        }
        if self.projection_rule_nodes == 0 || self.projection_rule_nodes > crate::numerics::MAX_NODES {
            return Err(Error::InvalidArgument("projection rule size out of range".into()));
        }
        Ok(())
    }
}

/// Rebase test for one axis. A negative or non-finite variance always asks
/// for a rebase.
pub(crate) fn axis_needs_rebase(mean: f64, var: f64, mu: f64, sigma: f64, cfg: &AgaConfig) -> bool {
    if !(var > 0.0) || !var.is_finite() {
        return true;
    }
    (mean - mu).abs() > cfg.threshold_mu * sigma || (var.sqrt() / sigma - 1.0).abs() > cfg.threshold_sigma
}

/// True iff the estimate has left the basis: `|x̂ − μ| > θ_μ σ` or `|σ̂/σ − 1| > θ_σ`.
pub fn should_rebase(est: &FilterEstimate, basis: &BasisSpec, cfg: &AgaConfig) -> bool {
    axis_needs_rebase(est.mean1(), est.var1(), basis.mu, basis.sigma, cfg)
}

/// `T[(i, j)] = (e_j^old, e_i^new)`, so that `ψ_new = T ψ_old`.
///
/// The product of an old and a new basis function is a polynomial times a
/// Gaussian centered at `c = (μ_n σ_o² + μ_o σ_n²)/(σ_n² + σ_o²)` with scale
/// `s² = 2σ_n²σ_o²/(σ_n² + σ_o²)`; mapping the rule to that frame makes the
/// integrals exact once the rule has at least `n` nodes.
pub fn transition_matrix(old: &BasisSpec, new: &BasisSpec, rule: &QuadratureRule) -> Result<DMatrix<f64>> {
    if old.family != BasisFamily::Hermite || new.family != BasisFamily::Hermite {
        return Err(Error::InvalidArgument("basis relocation is implemented for the Hermite family".into()));
    }
    let (so2, sn2) = (old.sigma * old.sigma, new.sigma * new.sigma);
    let center = (new.mu * so2 + old.mu * sn2) / (sn2 + so2);
    let scale = (2.0 * sn2 * so2 / (sn2 + so2)).sqrt();
    let mut t = DMatrix::zeros(new.n, old.n);
    for (x, w) in rule.mapped(center, scale) {
        let vo = old.eval_all(x);
        let vn = new.eval_all(x);
        for i in 0..new.n {
            let wi = w * vn[i];
            for j in 0..old.n {
                t[(i, j)] += wi * vo[j];
            }
        }
    }
    Ok(t)
}

/// Re-projects a state onto the basis located at `(new_mu, new_sigma)`.
pub fn rebase(state: &FilterState, new_mu: f64, new_sigma: f64, rule: &QuadratureRule) -> Result<FilterState> {
    let new = state.basis.with_location(new_mu, new_sigma)?;
    let t = transition_matrix(&state.basis, &new, rule)?;
    let coeffs: DVector<f64> = apply_axis(&state.coeffs, state.basis.n, 1, 0, &t);
    let (before, after) = (state.coeffs.norm(), coeffs.norm());
    if !(after * after >= 0.5 * before * before) {
        return Err(Error::RebaseMassLoss { retained: 100.0 * (after / before).powi(2) });
    }
    Ok(FilterState { coeffs, log_scale: state.log_scale, basis: new, t: state.t })
}

/// Hermite basis of size `n` located at the mean and standard deviation of
/// the model's initial law.
pub fn initial_basis(spec: &ModelSpec, n: usize) -> Result<BasisSpec> {
    if spec.dim_x != 1 {
        return Err(Error::InvalidArgument("initial_basis is one-dimensional".into()));
    }
    BasisSpec::new(BasisFamily::Hermite, n, spec.mu0[0], spec.cov0[(0, 0)].sqrt())
}

/// Adaptive Galerkin filter over a path.
pub fn run_aga(
    spec: &ModelSpec,
    basis0: &BasisSpec,
    method: Method,
    bundle: &PathBundle,
    cfg: &AgaConfig,
) -> Result<Vec<FilterEstimate>> {
    run_aga_with(spec, basis0, method, bundle, cfg, &FilterOptions::default())
}

pub fn run_aga_with(
    spec: &ModelSpec,
    basis0: &BasisSpec,
    method: Method,
    bundle: &PathBundle,
    cfg: &AgaConfig,
    opts: &FilterOptions,
) -> Result<Vec<FilterEstimate>> {
    run_aga_with_state(spec, basis0, method, bundle, cfg, opts).map(|r| r.0)
}

/// [`run_aga_with`] that also returns the state after the last step.
pub fn run_aga_with_state(
    spec: &ModelSpec,
    basis0: &BasisSpec,
    method: Method,
    bundle: &PathBundle,
    cfg: &AgaConfig,
    opts: &FilterOptions,
) -> Result<(Vec<FilterEstimate>, FilterState)> {
    if basis0.family != BasisFamily::Hermite {
        return Err(Error::InvalidArgument("the adaptive filter needs a Hermite basis".into()));
    }
    let q0 = initial_coefficients(spec, basis0)?;
    let (out, last) = run_driver_md(spec, &TensorBasisSpec::from_line(basis0), method, bundle, &q0, Some(cfg), opts)?;
    let state = FilterState { coeffs: last.coeffs, log_scale: last.log_scale, basis: last.basis.axis(0), t: last.t };
    Ok((out, state))
}

/// Rule used for re-projection, sized from the configuration.
pub fn projection_rule(cfg: &AgaConfig) -> Result<QuadratureRule> {
    gauss_hermite(cfg.projection_rule_nodes)
}
