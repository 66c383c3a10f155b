//! Reference filters: a bootstrap particle filter for both observation
//! channels and the Kalman–Bucy filter for the linear model without jumps.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::galerkin::{check_bundle, FilterEstimate};
use crate::model::{LinearModelParams, ModelSpec, PathBundle};

/// Stream used by the particle filter, distinct from the simulation streams.
const PARTICLE_STREAM: u64 = 7;

/// Weighted particle approximation of the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    /// `N × d`, one row per particle
    pub positions: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    pub ess: f64,
}

impl ParticleCloud {
    fn uniform(positions: Vec<Vec<f64>>) -> Self {
        let n = positions.len();
        let lw = -(n as f64).ln();
        ParticleCloud { positions, log_weights: vec![lw; n], ess: n as f64 }
    }

    /// Shifts log-weights so that the weights sum to one and updates the ESS.
    /// Returns `false` when every weight is zero or not finite.
    pub fn normalize(&mut self) -> bool {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return false;
        }
        let sum: f64 = self.log_weights.iter().map(|l| (l - max).exp()).sum();
        let shift = max + sum.ln();
        let mut sq = 0.0;
        for l in self.log_weights.iter_mut() {
            *l -= shift;
            let w = l.exp();
            sq += w * w;
        }
        self.ess = 1.0 / sq;
        true
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// Weighted per-axis mean and variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.positions.first().map_or(0, |p| p.len());
        let w = self.weights();
        let mut mean = vec![0.0; d];
        for (p, wi) in self.positions.iter().zip(&w) {
            for a in 0..d {
                mean[a] += wi * p[a];
            }
        }
        let mut var = vec![0.0; d];
        for (p, wi) in self.positions.iter().zip(&w) {
            for a in 0..d {
                let u = p[a] - mean[a];
                var[a] += wi * u * u;
            }
        }
        (mean, var)
    }

    /// Systematic resampling with a single uniform draw `u ∈ [0, 1)`.
    pub fn resample_systematic(&mut self, u: f64) {
        let n = self.positions.len();
        let w = self.weights();
        let mut out = Vec::with_capacity(n);
        let mut cum = w[0];
        let mut j = 0;
        for k in 0..n {
            let target = (k as f64 + u) / n as f64;
            while cum < target && j + 1 < n {
                j += 1;
                cum += w[j];
            }
            out.push(self.positions[j].clone());
        }
        *self = ParticleCloud::uniform(out);
    }
}

fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Bootstrap particle filter.
///
/// Each step weights the particles by the likelihood of the increments,
/// `exp(h(x)ᵀdz − ½|h(x)|² dt) · λ(x)^{dn} · exp(−(λ(x) − 1) dt)`, resamples
/// systematically when the effective sample size drops below `N/2`, then
/// propagates by Euler–Maruyama. The weights use the particle positions at the
/// start of the step, matching how the increments are simulated.
pub fn particle_filter(
    spec: &ModelSpec,
    bundle: &PathBundle,
    n_particles: usize,
    seed: u64,
) -> Result<Vec<FilterEstimate>> {
    if n_particles < 2 {
        return Err(Error::InvalidArgument("the particle filter needs at least two particles".into()));
    }
    check_bundle(spec, bundle)?;
    let (d, m, l) = (spec.dim_x, spec.dim_noise, spec.dim_z);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PARTICLE_STREAM);
    let root = psd_sqrt(&spec.cov0);
    let positions = (0..n_particles)
        .map(|_| {
            let xi = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
            (&spec.mu0 + &root * xi).as_slice().to_vec()
        })
        .collect();
    let mut cloud = ParticleCloud::uniform(positions);

    let estimate = |cloud: &ParticleCloud, t: f64| {
        let (mean, variance) = cloud.moments();
        FilterEstimate {
            t,
            mean,
            variance,
            log_scale: 0.0,
            neg_mass_fraction: 0.0,
            rebased: false,
            mu_basis: vec![f64::NAN; d],
            sigma_basis: vec![f64::NAN; d],
        }
    };
    let mut out = Vec::with_capacity(bundle.steps() + 1);
    out.push(estimate(&cloud, 0.0));

    let dt = bundle.dt;
    let sqdt = dt.sqrt();
    let mut h = vec![0.0; l];
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    let mut noise = vec![0.0; m];
    for k in 0..bundle.steps() {
        let dz = &bundle.dz[k];
        let dn = bundle.dn[k];
        for (p, lw) in cloud.positions.iter().zip(cloud.log_weights.iter_mut()) {
            spec.obs(p, &mut h);
            let mut inc = 0.0;
            for (hv, z) in h.iter().zip(dz) {
                inc += hv * z - 0.5 * hv * hv * dt;
            }
            if spec.has_point_process() {
                let lam = spec.intensity(p);
                inc += dn as f64 * lam.ln() - (lam - 1.0) * dt;
            }
            *lw += inc;
        }
        if !cloud.normalize() {
            return Err(Error::WeightCollapse { step: k + 1 });
        }
        if cloud.ess < 0.5 * n_particles as f64 {
            let u: f64 = rng.random();
            cloud.resample_systematic(u);
        }
        for p in cloud.positions.iter_mut() {
            spec.drift(p, &mut b);
            spec.diffusion(p, &mut s);
            for v in noise.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            for a in 0..d {
                let diff: f64 = (0..m).map(|j| s[a * m + j] * noise[j]).sum();
                p[a] += b[a] * dt + diff * sqdt;
            }
        }
        out.push(estimate(&cloud, bundle.times[k + 1]));
    }
    Ok(out)
}

/// Kalman–Bucy filter for the linear model without jumps, by explicit Euler:
///
/// `m ← m + b m dt + P h (dz − h m dt)`, `P ← P + (2bP + σ² − h²P²) dt`.
pub fn kalman_bucy(p: &LinearModelParams, bundle: &PathBundle) -> Result<(Vec<f64>, Vec<f64>)> {
    if bundle.dz.iter().any(|z| z.len() != 1) {
        return Err(Error::ShapeMismatch("Kalman–Bucy needs a single observation channel".into()));
    }
    let dt = bundle.dt;
    let mut m = p.mu0;
    let mut var = p.var0;
    let mut means = Vec::with_capacity(bundle.steps() + 1);
    let mut vars = Vec::with_capacity(bundle.steps() + 1);
    means.push(m);
    vars.push(var);
    for z in &bundle.dz {
        let innovation = z[0] - p.h * m * dt;
        let next_m = m + p.b * m * dt + var * p.h * innovation;
        let next_v = var + (2.0 * p.b * var + p.sigma * p.sigma - p.h * p.h * var * var) * dt;
        m = next_m;
        var = next_v;
        means.push(m);
        vars.push(var);
    }
    Ok((means, vars))
}

/// Positive root of `2bP + σ² − h²P² = 0`.
pub fn stationary_variance(p: &LinearModelParams) -> f64 {
    let h2 = p.h * p.h;
    (p.b + (p.b * p.b + p.sigma * p.sigma * h2).sqrt()) / h2
}

/// Gaussian density with the given mean and variance.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let u = x - mean;
    (-0.5 * u * u / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}
