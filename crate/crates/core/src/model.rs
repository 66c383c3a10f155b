//! Signal/observation model and forward simulation.
//!
//! The signal solves `dX = b(X) dt + σ(X) dV` on `ℝ^d`; it is observed through
//! `dZ = h(X) dt + dW` on `ℝ^l` and through a doubly stochastic Poisson
//! process `N` with intensity `λ(X)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// RNG stream identifiers; every path owns one generator per stream.
const SIGNAL_STREAM: u64 = 0;
const DIFFUSIVE_STREAM: u64 = 1;
const JUMP_STREAM: u64 = 2;

/// Clamping interval for the point-process intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for IntensityBounds {
    fn default() -> Self {
        IntensityBounds { min: 1e-6, max: 1e4 }
    }
}

#[derive(Clone)]
struct Intensity {
    f: ScalarFn,
    bounds: IntensityBounds,
    warned: Arc<AtomicBool>,
}

/// Quadratic intensity `λ(x) = base + Σ_k diag_k x_k²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticIntensity {
    pub base: f64,
    pub diag: DVector<f64>,
}

/// Declared affine structure of a model: affine drift and observation,
/// constant diffusion and a diagonal quadratic intensity. Models carrying
/// this declaration get closed-form (Kronecker-factored) coefficient matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStructure {
    /// `b(x) = drift · x + drift_offset`
    pub drift: DMatrix<f64>,
    pub drift_offset: DVector<f64>,
    /// constant `σ`, `d × m`
    pub diffusion: DMatrix<f64>,
    /// `h(x) = obs · x + obs_offset`
    pub obs: DMatrix<f64>,
    pub obs_offset: DVector<f64>,
    /// `None` disables the point process (`λ ≡ 0`).
    pub intensity: Option<QuadraticIntensity>,
}

impl AffineStructure {
    pub fn dim_x(&self) -> usize {
        self.drift.nrows()
    }

    /// `a = σ σᵀ`
    pub fn diffusion_cov(&self) -> DMatrix<f64> {
        &self.diffusion * self.diffusion.transpose()
    }

    fn validate(&self) -> Result<()> {
        let d = self.drift.nrows();
        let ok = self.drift.ncols() == d
            && self.drift_offset.len() == d
            && self.diffusion.nrows() == d
            && self.obs.ncols() == d
            && self.obs_offset.len() == self.obs.nrows()
            && self.intensity.as_ref().is_none_or(|q| q.diag.len() == d);
        if !ok {
            return Err(Error::ShapeMismatch("inconsistent affine model dimensions".into()));
        }
        Ok(())
    }
}

/// Parameters of the scalar linear model `b(x) = b x`, `σ(x) = σ`,
/// `h(x) = h x`, `λ(x) = λ x²`, `X_0 ~ N(mu0, var0)`.
///
/// `lambda = 0` switches the point process off entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModelParams {
    pub b: f64,
    pub sigma: f64,
    pub h: f64,
    pub lambda: f64,
    pub mu0: f64,
    pub var0: f64,
}

impl LinearModelParams {
    /// Parameter values of the reference experiments (`h`, `λ` vary per run).
    pub fn paper_defaults(h: f64, lambda: f64) -> Self {
        LinearModelParams { b: 0.5, sigma: 2.0, h, lambda, mu0: 5.0, var0: 0.01 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.b, self.sigma, self.h, self.lambda, self.mu0, self.var0]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.sigma > 0.0) || self.lambda < 0.0 || !(self.var0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "linear model needs sigma > 0, lambda >= 0, var0 > 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn point_process_enabled(&self) -> bool {
        self.lambda > 0.0
    }
}

/// Full model specification.
#[derive(Clone)]
pub struct ModelSpec {
    pub dim_x: usize,
    pub dim_noise: usize,
    pub dim_z: usize,
    drift: VectorFn,
    diffusion: VectorFn,
    obs: VectorFn,
    intensity: Option<Intensity>,
    pub mu0: DVector<f64>,
    pub cov0: DMatrix<f64>,
    affine: Option<AffineStructure>,
    linear: Option<LinearModelParams>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim_x", &self.dim_x)
            .field("dim_noise", &self.dim_noise)
            .field("dim_z", &self.dim_z)
            .field("point_process", &self.intensity.is_some())
            .field("mu0", &self.mu0.as_slice())
            .field("affine", &self.affine.is_some())
            .field("linear", &self.linear)
            .finish()
    }
}

/// Functions of a general model.
pub struct ModelFunctions {
    pub drift: VectorFn,
    /// writes the `d × m` diffusion matrix row-major
    pub diffusion: VectorFn,
    pub obs: VectorFn,
    /// `None` disables the point process
    pub intensity: Option<ScalarFn>,
}

impl ModelSpec {
    /// A general model. `cov0` must be symmetric positive semidefinite.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim_x: usize,
        dim_noise: usize,
        dim_z: usize,
        functions: ModelFunctions,
        bounds: IntensityBounds,
        mu0: DVector<f64>,
        cov0: DMatrix<f64>,
    ) -> Result<Self> {
        if dim_x == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        if mu0.len() != dim_x || cov0.nrows() != dim_x || cov0.ncols() != dim_x {
            return Err(Error::ShapeMismatch("initial law does not match the state dimension".into()));
        }
        if (&cov0 - cov0.transpose()).amax() > 1e-12 * (1.0 + cov0.amax()) {
            return Err(Error::InvalidArgument("initial covariance must be symmetric".into()));
        }
        if SymmetricEigen::new(cov0.clone()).eigenvalues.iter().any(|&v| v < -1e-12) {
            return Err(Error::InvalidArgument("initial covariance must be positive semidefinite".into()));
        }
        if !(bounds.min > 0.0) || !(bounds.max >= bounds.min) {
            return Err(Error::InvalidArgument(format!(
                "intensity bounds must satisfy 0 < min <= max, got {bounds:?}"
            )));
        }
        Ok(ModelSpec {
            dim_x,
            dim_noise,
            dim_z,
            drift: functions.drift,
            diffusion: functions.diffusion,
            obs: functions.obs,
            intensity: functions
                .intensity
                .map(|f| Intensity { f, bounds, warned: Arc::new(AtomicBool::new(false)) }),
            mu0,
            cov0,
            affine: None,
            linear: None,
        })
    }

    /// A model with declared affine structure.
    pub fn from_affine(
        structure: AffineStructure,
        bounds: IntensityBounds,
        mu0: DVector<f64>,
        cov0: DMatrix<f64>,
    ) -> Result<Self> {
        structure.validate()?;
        let d = structure.dim_x();
        let m = structure.diffusion.ncols();
        let l = structure.obs.nrows();

        let s = structure.clone();
        let drift: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = s.drift_offset[i] + (0..x.len()).map(|j| s.drift[(i, j)] * x[j]).sum::<f64>();
            }
        });
        let s = structure.clone();
        let diffusion: VectorFn = Arc::new(move |_x: &[f64], out: &mut [f64]| {
            for i in 0..s.diffusion.nrows() {
                for j in 0..s.diffusion.ncols() {
                    out[i * s.diffusion.ncols() + j] = s.diffusion[(i, j)];
                }
            }
        });
        let s = structure.clone();
        let obs: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = s.obs_offset[i] + (0..x.len()).map(|j| s.obs[(i, j)] * x[j]).sum::<f64>();
            }
        });
        let intensity: Option<ScalarFn> = structure.intensity.clone().map(|q| {
            Arc::new(move |x: &[f64]| {
                q.base + x.iter().zip(q.diag.iter()).map(|(v, c)| c * v * v).sum::<f64>()
            }) as ScalarFn
        });

        let mut spec = ModelSpec::new(
            d,
            m,
            l,
            ModelFunctions { drift, diffusion, obs, intensity },
            bounds,
            mu0,
            cov0,
        )?;
        spec.affine = Some(structure);
        Ok(spec)
    }

    pub fn affine(&self) -> Option<&AffineStructure> {
        self.affine.as_ref()
    }

    pub fn linear(&self) -> Option<&LinearModelParams> {
        self.linear.as_ref()
    }

    pub fn has_point_process(&self) -> bool {
        self.intensity.is_some()
    }

    pub fn intensity_bounds(&self) -> Option<IntensityBounds> {
        self.intensity.as_ref().map(|i| i.bounds)
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn obs(&self, x: &[f64], out: &mut [f64]) {
        (self.obs)(x, out)
    }

    /// `λ(x)` clamped to the configured bounds; identically zero when the
    /// point process is disabled.
    pub fn intensity(&self, x: &[f64]) -> f64 {
        match &self.intensity {
            None => 0.0,
            Some(i) => {
                let raw = (i.f)(x);
                let clamped = raw.clamp(i.bounds.min, i.bounds.max);
                if clamped != raw && !i.warned.swap(true, Ordering::Relaxed) {
                    log::warn!(
                        "intensity {raw:.3e} outside [{:.1e}, {:.1e}]; clamping (reported once)",
                        i.bounds.min,
                        i.bounds.max
                    );
                }
                clamped
            }
        }
    }

    /// `a(x) = σ(x) σ(x)ᵀ`, row-major `d × d`.
    pub fn diffusion_cov(&self, x: &[f64], out: &mut [f64]) {
        let (d, m) = (self.dim_x, self.dim_noise);
        let mut s = vec![0.0; d * m];
        self.diffusion(x, &mut s);
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum();
            }
        }
    }

    /// Replaces the point process by `λ ≡ 0` (no events are ever observed).
    pub fn without_point_process(&self) -> ModelSpec {
        let mut s = self.clone();
        s.intensity = None;
        if let Some(a) = s.affine.as_mut() {
            a.intensity = None;
        }
        if let Some(p) = s.linear.as_mut() {
            p.lambda = 0.0;
        }
        s
    }
}

/// The scalar linear model with intensity clamped to `bounds`.
pub fn make_linear_model_with(p: &LinearModelParams, bounds: IntensityBounds) -> Result<ModelSpec> {
    p.validate()?;
    let structure = AffineStructure {
        drift: DMatrix::from_element(1, 1, p.b),
        drift_offset: DVector::zeros(1),
        diffusion: DMatrix::from_element(1, 1, p.sigma),
        obs: DMatrix::from_element(1, 1, p.h),
        obs_offset: DVector::zeros(1),
        intensity: p
            .point_process_enabled()
            .then(|| QuadraticIntensity { base: 0.0, diag: DVector::from_element(1, p.lambda) }),
    };
    let mut spec = ModelSpec::from_affine(
        structure,
        bounds,
        DVector::from_element(1, p.mu0),
        DMatrix::from_element(1, 1, p.var0),
    )?;
    spec.linear = Some(*p);
    Ok(spec)
}

/// The scalar linear model with default intensity bounds `[1e-6, 1e4]`.
pub fn make_linear_model(p: &LinearModelParams) -> Result<ModelSpec> {
    make_linear_model_with(p, IntensityBounds::default())
}

/// `d` independent copies of the scalar linear model, one observation channel
/// per axis, with the point process driven by the first axis only
/// (`λ(x) = λ x_1²`). The initial law is `N(mu0·1, var0·I)`.
pub fn make_decoupled_linear_model(p: &LinearModelParams, d: usize) -> Result<ModelSpec> {
    p.validate()?;
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let mut diag = DVector::zeros(d);
    diag[0] = p.lambda;
    let structure = AffineStructure {
        drift: DMatrix::identity(d, d) * p.b,
        drift_offset: DVector::zeros(d),
        diffusion: DMatrix::identity(d, d) * p.sigma,
        obs: DMatrix::identity(d, d) * p.h,
        obs_offset: DVector::zeros(d),
        intensity: p.point_process_enabled().then_some(QuadraticIntensity { base: 0.0, diag }),
    };
    ModelSpec::from_affine(
        structure,
        IntensityBounds::default(),
        DVector::from_element(d, p.mu0),
        DMatrix::identity(d, d) * p.var0,
    )
}

/// Five-dimensional coupled linear model with three noise channels, three
/// observation channels and a quadratic intensity. Started from `N(0, I)`.
pub fn make_coupled_5d_model() -> Result<ModelSpec> {
    #[rustfmt::skip]
    let drift = DMatrix::from_row_slice(5, 5, &[
        1.0,  0.0,  0.0,  1.0,  0.0,
        1.0,  1.0, -1.0,  0.0,  1.0,
        0.0,  1.0, -1.0, -1.0, -1.0,
        0.0, -1.0, -1.0,  1.0,  1.0,
        1.0, -1.0,  0.0,  0.0,  1.0,
    ]);
    #[rustfmt::skip]
    let diffusion = DMatrix::from_row_slice(5, 3, &[
        1.0, 0.0, 1.0,
        2.0, 1.0, 1.0,
        1.0, 1.0, 1.0,
        1.0, 1.0, 1.0,
        0.0, 0.0, 1.0,
    ]);
    #[rustfmt::skip]
    let obs = DMatrix::from_row_slice(3, 5, &[
        0.2, 0.3, 0.2, 0.3, 0.4,
        0.2, 0.1, 0.2, 0.1, 0.2,
        0.2, 0.2, 0.4, 0.2, 0.2,
    ]);
    let structure = AffineStructure {
        drift,
        drift_offset: DVector::zeros(5),
        diffusion,
        obs,
        obs_offset: DVector::zeros(3),
        intensity: Some(QuadraticIntensity {
            base: 0.0,
            diag: DVector::from_column_slice(&[0.1, 0.2, 0.3, 0.1, 0.1]),
        }),
    };
    ModelSpec::from_affine(structure, IntensityBounds::default(), DVector::zeros(5), DMatrix::identity(5, 5))
}

/// Simulated signal and observation increments on an equidistant grid.
///
/// `dz[k]` and `dn[k]` are the increments over `(t_k, t_{k+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub dt: f64,
    pub times: Vec<f64>,
    pub x_path: Vec<Vec<f64>>,
    pub dz: Vec<Vec<f64>>,
    pub dn: Vec<u32>,
    pub seed: u64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Euler–Maruyama path of the signal, `steps + 1` points starting from a
/// draw of the initial law.
pub fn simulate_signal(spec: &ModelSpec, dt: f64, steps: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("at least one step is required".into()));
    }
    let (d, m) = (spec.dim_x, spec.dim_noise);
    let mut rng = rng_for(seed, SIGNAL_STREAM);
    let root = psd_sqrt(&spec.cov0);
    let xi = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
    let x0 = &spec.mu0 + root * xi;

    let sqdt = dt.sqrt();
    let mut path = Vec::with_capacity(steps + 1);
    path.push(x0.as_slice().to_vec());
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * m];
    let mut noise = vec![0.0; m];
    for _ in 0..steps {
        let x = path.last().expect("non-empty path");
        spec.drift(x, &mut b);
        spec.diffusion(x, &mut s);
        for v in noise.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let next: Vec<f64> = (0..d)
            .map(|i| {
                let diff: f64 = (0..m).map(|k| s[i * m + k] * noise[k]).sum();
                x[i] + b[i] * dt + diff * sqdt
            })
            .collect();
        path.push(next);
    }
    Ok(path)
}

/// Observation increments along a signal path: `dz_k = h(X_{t_k}) dt + √dt η_k`
/// and `dn_k ~ Poisson(λ(X_{t_k}) dt)`, from streams independent of the signal noise.
pub fn simulate_observations(
    spec: &ModelSpec,
    x_path: &[Vec<f64>],
    dt: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<u32>)> {
    if x_path.len() < 2 {
        return Err(Error::InvalidArgument("signal path needs at least two points".into()));
    }
    let l = spec.dim_z;
    let mut z_rng = rng_for(seed, DIFFUSIVE_STREAM);
    let mut n_rng = rng_for(seed, JUMP_STREAM);
    let sqdt = dt.sqrt();
    let mut h = vec![0.0; l];
    let mut dz = Vec::with_capacity(x_path.len() - 1);
    let mut dn = Vec::with_capacity(x_path.len() - 1);
    for x in &x_path[..x_path.len() - 1] {
        spec.obs(x, &mut h);
        dz.push(
            h.iter()
                .map(|hv| {
                    let eta: f64 = StandardNormal.sample(&mut z_rng);
                    hv * dt + sqdt * eta
                })
                .collect(),
        );
        let mean = spec.intensity(x) * dt;
        let count = if mean > 0.0 {
            let pois = Poisson::new(mean)
                .map_err(|e| Error::InvalidArgument(format!("Poisson mean {mean}: {e}")))?;
            let v: f64 = pois.sample(&mut n_rng);
            v as u32
        } else {
            0
        };
        dn.push(count);
    }
    Ok((dz, dn))
}

/// Signal plus both observation channels for one path.
pub fn simulate_bundle(spec: &ModelSpec, dt: f64, steps: usize, seed: u64) -> Result<PathBundle> {
    let x_path = simulate_signal(spec, dt, steps, seed)?;
    let (dz, dn) = simulate_observations(spec, &x_path, dt, seed)?;
    let times = (0..=steps).map(|k| k as f64 * dt).collect();
    Ok(PathBundle { dt, times, x_path, dz, dn, seed })
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.dn.len()
    }

    pub fn dim_x(&self) -> usize {
        self.x_path.first().map_or(0, |x| x.len())
    }

    pub fn dim_z(&self) -> usize {
        self.dz.first().map_or(0, |z| z.len())
    }

    /// A bundle of length zero holding only the initial point.
    pub fn empty(dt: f64, x0: Vec<f64>) -> Self {
        PathBundle { dt, times: vec![0.0], x_path: vec![x0], dz: Vec::new(), dn: Vec::new(), seed: 0 }
    }

    /// The same path observed on a grid `factor` times coarser: increments
    /// are summed and the signal is subsampled.
    pub fn coarsen(&self, factor: usize) -> Result<PathBundle> {
        if factor == 0 || self.steps() % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.steps()
            )));
        }
        let k = self.steps() / factor;
        let l = self.dim_z();
        let dt = self.dt * factor as f64;
        let mut dz = Vec::with_capacity(k);
        let mut dn = Vec::with_capacity(k);
        for c in 0..k {
            let range = c * factor..(c + 1) * factor;
            let mut z = vec![0.0; l];
            for row in &self.dz[range.clone()] {
                for (a, b) in z.iter_mut().zip(row) {
                    *a += b;
                }
            }
            dz.push(z);
            dn.push(self.dn[range].iter().sum());
        }
        Ok(PathBundle {
            dt,
            times: (0..=k).map(|i| i as f64 * dt).collect(),
            x_path: (0..=k).map(|i| self.x_path[i * factor].clone()).collect(),
            dz,
            dn,
            seed: self.seed,
        })
    }

    /// SHA-256 of the observation increments and signal, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dt.to_le_bytes());
        for x in &self.x_path {
            for v in x {
                h.update(v.to_le_bytes());
            }
        }
        for z in &self.dz {
            for v in z {
                h.update(v.to_le_bytes());
            }
        }
        for n in &self.dn {
            h.update(n.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// CSV with columns `t, x_1..x_d, dz_1..dz_l, dn`. Row `k ≥ 1` carries the
    /// increments over `(t_{k−1}, t_k]`; row 0 carries zeros.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.dim_x();
        let l = self.dim_z();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        header.extend((1..=l).map(|i| format!("dz_{i}")));
        header.push("dn".into());
        w.write_record(&header).map_err(csv_err)?;
        for k in 0..self.times.len() {
            let mut row = vec![fmt_f64(self.times[k])];
            row.extend(self.x_path[k].iter().map(|v| fmt_f64(*v)));
            if k == 0 {
                row.extend((0..l).map(|_| fmt_f64(0.0)));
                row.push("0".into());
            } else {
                row.extend(self.dz[k - 1].iter().map(|v| fmt_f64(*v)));
                row.push(self.dn[k - 1].to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<PathBundle> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        let d = header.iter().filter(|h| h.starts_with("x_")).count();
        let l = header.iter().filter(|h| h.starts_with("dz_")).count();
        if header.len() != d + l + 2 || header.get(0) != Some("t") || header.get(d + l + 1) != Some("dn") {
            return Err(Error::Parse(format!("unexpected path header: {header:?}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")))
        };
        let mut times = Vec::new();
        let mut x_path = Vec::new();
        let mut dz = Vec::new();
        let mut dn = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != d + l + 2 {
                return Err(Error::Parse(format!("row {k} has {} fields", rec.len())));
            }
            times.push(parse(&rec[0])?);
            x_path.push((1..=d).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?);
            let z = (d + 1..=d + l).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            let n: u32 = rec[d + l + 1]
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("bad count in row {k}: {e}")))?;
            if k > 0 {
                dz.push(z);
                dn.push(n);
            }
        }
        if times.len() < 2 {
            return Err(Error::Parse("path file needs at least two rows".into()));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) {
            return Err(Error::Parse("time column must be increasing".into()));
        }
        Ok(PathBundle { dt, times, x_path, dz, dn, seed: 0 })
    }
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}
