//! Projected Zakai system: coefficient matrices, time steppers, conditional
//! moments and density reconstruction.
//!
//! Matrices follow the convention `M[(j, i)] = (e_i, 𝒪 e_j)` (0-based), so the
//! coefficient vector `Υ` evolves as
//!
//! `dΥ = D⁻¹ [ (A − C) Υ dt + Σ_ℓ B^ℓ Υ dZ_ℓ + C Υ dN ]`.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::hermite::{
    build_coeff_table, project_gaussian_adapted, BasisFamily, BasisSpec, HermiteCoeffTable,
    MomentTable, MAX_DEGREE,
};
use crate::model::{fmt_f64, ModelSpec, PathBundle};
use crate::multidim::{affine_tensor_matrices, TensorBasisSpec};
use crate::numerics::{default_nodes, gauss_hermite, inner_product, matrix_exp, GramFactor, QuadratureRule};

/// Time stepper for the coefficient SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Euler–Maruyama.
    Em,
    /// Splitting-up: semigroup, diffusive observation, jumps.
    Su,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Em => "EM",
            Method::Su => "SU",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(Method::Em),
            "su" => Ok(Method::Su),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?} (expected em or su)"))),
        }
    }
}

/// The basis a set of matrices was assembled in.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixBasis {
    Line(BasisSpec),
    Tensor(TensorBasisSpec),
}

/// `A`, `B^1..B^l`, `C` and the Gram matrix `D` of the projected system.
#[derive(Debug, Clone)]
pub struct CoefficientMatrices {
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub basis: MatrixBasis,
    /// `D = I` by construction (Hermite family).
    pub orthonormal: bool,
}

impl CoefficientMatrices {
    pub fn size(&self) -> usize {
        self.a.nrows()
    }
}

/// Coefficient vector of the unnormalized density in a given basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub coeffs: DVector<f64>,
    /// Logarithm of the normalization factors removed so far.
    pub log_scale: f64,
    pub basis: BasisSpec,
    pub t: f64,
}

/// Conditional moments at one grid point, with per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterEstimate {
    pub t: f64,
    /// conditional mean per axis
    pub mean: Vec<f64>,
    /// conditional variance per axis
    pub variance: Vec<f64>,
    pub log_scale: f64,
    /// share of the absolute mass of `q^{(n)}` that is negative; `NaN` when
    /// not evaluated
    pub neg_mass_fraction: f64,
    pub rebased: bool,
    pub mu_basis: Vec<f64>,
    pub sigma_basis: Vec<f64>,
}

impl FilterEstimate {
    /// Mean of the first axis.
    pub fn mean1(&self) -> f64 {
        self.mean[0]
    }

    /// Variance of the first axis.
    pub fn var1(&self) -> f64 {
        self.variance[0]
    }

    /// Standard deviation of the first axis (`NaN` for negative variance).
    pub fn std1(&self) -> f64 {
        self.variance[0].sqrt()
    }
}

/// Options shared by the filter drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOptions {
    /// Rescale `Υ` to unit norm after each step.
    pub renormalize: bool,
    /// Node count for quadrature assembly (default depends on `n`).
    pub quad_nodes: Option<usize>,
    /// Evaluate the negative-mass diagnostic at every step.
    pub neg_mass: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions { renormalize: true, quad_nodes: None, neg_mass: true }
    }
}

struct Tables {
    coeffs: HermiteCoeffTable,
    moments: MomentTable,
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let coeffs = build_coeff_table(MAX_DEGREE).expect("degree 40 table fits in i128");
        let moments = MomentTable::new(&coeffs, 2, MAX_BASIS_SIZE).expect("second moments up to degree 40");
        Tables { coeffs, moments }
    })
}

/// Shared Hermite coefficient table up to the maximum supported degree.
pub fn coeff_table() -> &'static HermiteCoeffTable {
    &tables().coeffs
}

fn grid_rule() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(64).expect("64-node rule"))
}

/// Largest Hermite basis for which second moments stay within the exact tables
/// (`(x², e_n)` involves degree `n + 1`).
pub const MAX_BASIS_SIZE: usize = MAX_DEGREE - 1;

pub(crate) fn check_size(basis: &BasisSpec) -> Result<()> {
    if basis.family == BasisFamily::Hermite && basis.n > MAX_BASIS_SIZE {
        return Err(Error::DegreeOverflow { degree: basis.n + 1, max: MAX_DEGREE });
    }
    Ok(())
}

/// `(x^j, e_i)`, `j = 0, 1, 2`, for every basis function.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentWeights {
    pub w: [Vec<f64>; 3],
}

impl MomentWeights {
    pub fn for_basis(basis: &BasisSpec) -> Result<Self> {
        check_size(basis)?;
        Ok(match basis.family {
            BasisFamily::Hermite => {
                let t = &tables().moments;
                MomentWeights {
                    w: [0, 1, 2].map(|j| t.adapted(j, basis.n, basis.mu, basis.sigma)),
                }
            }
            BasisFamily::Gaussian => {
                let (centers, w) = basis.gaussian_layout();
                let mass = (4.0 * PI * w * w).powf(0.25);
                MomentWeights {
                    w: [
                        centers.iter().map(|_| mass).collect(),
                        centers.iter().map(|c| c * mass).collect(),
                        centers.iter().map(|c| (c * c + w * w) * mass).collect(),
                    ],
                }
            }
        })
    }

    /// Like [`MomentWeights::for_basis`] but from an explicit coefficient table.
    pub fn from_table(table: &HermiteCoeffTable, basis: &BasisSpec) -> Result<Self> {
        if basis.family != BasisFamily::Hermite {
            return Self::for_basis(basis);
        }
        let t = MomentTable::new(table, 2, basis.n)?;
        Ok(MomentWeights { w: [0, 1, 2].map(|j| t.adapted(j, basis.n, basis.mu, basis.sigma)) })
    }
}

fn dot(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `Σ ψ_i (x^j, e_i)` for `j = 0, 1, 2`, checking the normalizer.
pub(crate) fn raw_moments(coeffs: &DVector<f64>, w0: &[f64], w1: &[f64], w2: &[f64]) -> Result<[f64; 3]> {
    let m0 = dot(w0, coeffs);
    let norm = coeffs.norm();
    if !(m0.abs() > 1e-12 * norm) || !m0.is_finite() {
        return Err(Error::DegenerateState { normalizer: m0 });
    }
    Ok([m0, dot(w1, coeffs), dot(w2, coeffs)])
}

pub(crate) fn moments_from_raw(r: [f64; 3]) -> (f64, f64) {
    let mean = r[1] / r[0];
    (mean, r[2] / r[0] - mean * mean)
}

/// Normalized conditional mean and variance of a state.
pub fn conditional_moments(state: &FilterState, table: &HermiteCoeffTable) -> Result<FilterEstimate> {
    let w = MomentWeights::from_table(table, &state.basis)?;
    let (mean, var) = moments_from_raw(raw_moments(&state.coeffs, &w.w[0], &w.w[1], &w.w[2])?);
    Ok(FilterEstimate {
        t: state.t,
        mean: vec![mean],
        variance: vec![var],
        log_scale: state.log_scale,
        neg_mass_fraction: f64::NAN,
        rebased: false,
        mu_basis: vec![state.basis.mu],
        sigma_basis: vec![state.basis.sigma],
    })
}

/// Normalized density `Σ ψ_i e_i(x) / Σ ψ_i (1, e_i)`; may be negative.
pub fn density_eval(state: &FilterState, x: f64) -> Result<f64> {
    let w = MomentWeights::for_basis(&state.basis)?;
    let m0 = raw_moments(&state.coeffs, &w.w[0], &w.w[1], &w.w[2])?[0];
    Ok(dot(&state.basis.eval_all(x), &state.coeffs) / m0)
}

/// [`density_eval`] clamped at zero.
pub fn density_eval_clamped(state: &FilterState, x: f64) -> Result<f64> {
    Ok(density_eval(state, x)?.max(0.0))
}

/// Per-basis data reused across steps: moment weights and basis values on a
/// fixed grid for the negative-mass diagnostic.
#[derive(Debug, Clone)]
pub(crate) struct BasisCache {
    pub weights: MomentWeights,
    grid: Option<(DMatrix<f64>, Vec<f64>)>,
}

impl BasisCache {
    pub fn new(basis: &BasisSpec, neg_mass: bool) -> Result<Self> {
        let weights = MomentWeights::for_basis(basis)?;
        let grid = neg_mass.then(|| {
            let scale = match basis.family {
                BasisFamily::Hermite => basis.sigma * std::f64::consts::SQRT_2,
                BasisFamily::Gaussian => 2.0 * basis.sigma,
            };
            let rule = grid_rule();
            let mut values = DMatrix::zeros(rule.len(), basis.n);
            let mut ws = Vec::with_capacity(rule.len());
            for (k, (x, w)) in rule.mapped(basis.mu, scale).enumerate() {
                for (i, v) in basis.eval_all(x).into_iter().enumerate() {
                    values[(k, i)] = v;
                }
                ws.push(w);
            }
            (values, ws)
        });
        Ok(BasisCache { weights, grid })
    }

    pub fn neg_mass_fraction(&self, coeffs: &DVector<f64>, sign: f64) -> f64 {
        match &self.grid {
            None => f64::NAN,
            Some((values, ws)) => {
                let q = values * coeffs;
                let (mut neg, mut total) = (0.0, 0.0);
                for (v, w) in q.iter().zip(ws) {
                    let v = v * sign;
                    total += w * v.abs();
                    if v < 0.0 {
                        neg -= w * v;
                    }
                }
                if total > 0.0 {
                    neg / total
                } else {
                    f64::NAN
                }
            }
        }
    }

    pub fn estimate(&self, state: &FilterState, rebased: bool) -> Result<FilterEstimate> {
        let raw = raw_moments(&state.coeffs, &self.weights.w[0], &self.weights.w[1], &self.weights.w[2])?;
        let (mean, var) = moments_from_raw(raw);
        Ok(FilterEstimate {
            t: state.t,
            mean: vec![mean],
            variance: vec![var],
            log_scale: state.log_scale,
            neg_mass_fraction: self.neg_mass_fraction(&state.coeffs, raw[0].signum()),
            rebased,
            mu_basis: vec![state.basis.mu],
            sigma_basis: vec![state.basis.sigma],
        })
    }
}

/// Closed-form matrices of the scalar linear model in the unadapted Hermite
/// basis, entry by entry (1-based `j`):
///
/// * `a_jj = −b/2 + σ²(1−2j)/8`, `a_{j,j+2} = (−b/2 + σ²/8)√(j(j+1))`,
///   `a_{j,j−2} = (b/2 + σ²/8)√((j−1)(j−2))`
/// * `b_{j,j±1} = h√j`, `h√(j−1)`
/// * `c_jj = λ(2j−1) − 1`, `c_{j,j+2} = λ√(j(j+1))`, `c_{j,j−2} = λ√((j−1)(j−2))`
pub fn kalman_matrices(n: usize, p: &crate::model::LinearModelParams) -> Result<CoefficientMatrices> {
    let basis = BasisSpec::hermite(n)?;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    let mut c = DMatrix::zeros(n, n);
    let s2 = p.sigma * p.sigma;
    for j in 1..=n {
        let jf = j as f64;
        let r = j - 1;
        a[(r, r)] = -p.b / 2.0 + s2 / 8.0 * (1.0 - 2.0 * jf);
        c[(r, r)] = p.lambda * (2.0 * jf - 1.0) - 1.0;
        if j < n {
            b[(r, r + 1)] = p.h * jf.sqrt();
        }
        if j >= 2 {
            b[(r, r - 1)] = p.h * (jf - 1.0).sqrt();
        }
        if j + 2 <= n {
            let up = (jf * (jf + 1.0)).sqrt();
            a[(r, r + 2)] = (-p.b / 2.0 + s2 / 8.0) * up;
            c[(r, r + 2)] = p.lambda * up;
        }
        if j >= 3 {
            let down = ((jf - 1.0) * (jf - 2.0)).sqrt();
            a[(r, r - 2)] = (p.b / 2.0 + s2 / 8.0) * down;
            c[(r, r - 2)] = p.lambda * down;
        }
    }
    Ok(CoefficientMatrices {
        a,
        b: vec![b],
        c,
        d: DMatrix::identity(n, n),
        basis: MatrixBasis::Line(basis),
        orthonormal: true,
    })
}

/// Value and first two derivatives of basis function `k` (0-based) at `x`.
fn single_with_derivatives(basis: &BasisSpec, k: usize, x: f64) -> (f64, f64, f64) {
    let (centers, w) = basis.gaussian_layout();
    let w2 = w * w;
    let u = x - centers[k];
    let g = (PI * w2).powf(-0.25) * (-0.5 * u * u / w2).exp();
    (g, -u / w2 * g, (u * u / (w2 * w2) - 1.0 / w2) * g)
}

/// Matrices by Gauss–Hermite quadrature of `(e_i, 𝓛e_j)`, `(e_i, h e_j)`,
/// `(e_i, (λ−1) e_j)` and `(e_i, e_j)`, each in a frame where the product
/// of the two basis functions is a polynomial times the rule's weight.
pub fn assemble_quadrature(
    spec: &ModelSpec,
    basis: &BasisSpec,
    rule: &QuadratureRule,
) -> Result<CoefficientMatrices> {
    if spec.dim_x != 1 {
        return Err(Error::InvalidArgument(format!(
            "one-dimensional assembly called with d = {}; use the tensor assembly",
            spec.dim_x
        )));
    }
    check_size(basis)?;
    let n = basis.n;
    let l = spec.dim_z;
    let mut a = DMatrix::zeros(n, n);
    let mut bs = vec![DMatrix::zeros(n, n); l];
    let mut c = DMatrix::zeros(n, n);
    let mut d = DMatrix::<f64>::zeros(n, n);
    let point_process = spec.has_point_process();

    // model functions at a point: drift, variance, observation, λ − 1
    let model_at = |x: f64| {
        let mut b = [0.0];
        let mut a = [0.0];
        let mut h = vec![0.0; l];
        spec.drift(&[x], &mut b);
        spec.diffusion_cov(&[x], &mut a);
        spec.obs(&[x], &mut h);
        let lam = if point_process { spec.intensity(&[x]) } else { 0.0 };
        (b[0], a[0], h, lam - 1.0)
    };

    match basis.family {
        BasisFamily::Hermite => {
            for (x, w) in rule.mapped(basis.mu, basis.sigma) {
                let v = basis.eval_with_derivatives(x);
                let (drift, var, h, lam1) = model_at(x);
                for j in 0..n {
                    let gen = drift * v.d1[j] + 0.5 * var * v.d2[j];
                    for i in 0..n {
                        let wi = w * v.value[i];
                        a[(j, i)] += wi * gen;
                        let prod = wi * v.value[j];
                        d[(j, i)] += prod;
                        c[(j, i)] += prod * lam1;
                        for (bl, hl) in bs.iter_mut().zip(&h) {
                            bl[(j, i)] += prod * hl;
                        }
                    }
                }
            }
        }
        BasisFamily::Gaussian => {
            for j in 0..n {
                for i in 0..n {
                    let (center, scale) = basis.pair_frame(i, j);
                    for (x, w) in rule.mapped(center, scale) {
                        let (ej, dj, d2j) = single_with_derivatives(basis, j, x);
                        let (ei, _, _) = single_with_derivatives(basis, i, x);
                        let (drift, var, h, lam1) = model_at(x);
                        let wi = w * ei;
                        a[(j, i)] += wi * (drift * dj + 0.5 * var * d2j);
                        let prod = wi * ej;
                        d[(j, i)] += prod;
                        c[(j, i)] += prod * lam1;
                        for (bl, hl) in bs.iter_mut().zip(&h) {
                            bl[(j, i)] += prod * hl;
                        }
                    }
                }
            }
        }
    }
    if let Some(k) = (0..n).find(|&k| !(d[(k, k)] > 1e-300) || !d[(k, k)].is_finite()) {
        return Err(Error::QuadratureUnderflow(format!(
            "basis function {} has no mass on the quadrature nodes",
            k + 1
        )));
    }
    Ok(CoefficientMatrices {
        a,
        b: bs,
        c,
        d,
        basis: MatrixBasis::Line(*basis),
        orthonormal: basis.is_orthonormal(),
    })
}

/// Matrices for the model in the given basis: closed forms for declared
/// affine models in a Hermite basis, quadrature otherwise.
pub fn assemble(spec: &ModelSpec, basis: &BasisSpec, quad_nodes: Option<usize>) -> Result<CoefficientMatrices> {
    check_size(basis)?;
    match (spec.affine(), basis.family) {
        (Some(structure), BasisFamily::Hermite) if spec.dim_x == 1 => {
            let mut m = affine_tensor_matrices(structure, &TensorBasisSpec::from_line(basis))?;
            m.basis = MatrixBasis::Line(*basis);
            Ok(m)
        }
        _ => {
            let rule = gauss_hermite(quad_nodes.unwrap_or_else(|| default_nodes(basis.n)))?;
            assemble_quadrature(spec, basis, &rule)
        }
    }
}

/// Coefficients `Υ_0 = D⁻¹ ((q_0, e_i))_i` of the model's Gaussian initial law.
pub fn initial_coefficients(spec: &ModelSpec, basis: &BasisSpec) -> Result<DVector<f64>> {
    if spec.dim_x != 1 {
        return Err(Error::InvalidArgument("initial_coefficients is one-dimensional".into()));
    }
    gaussian_coefficients(basis, spec.mu0[0], spec.cov0[(0, 0)])
}

/// Coefficients of the `N(mu0, var0)` density in any one-dimensional basis.
pub fn gaussian_coefficients(basis: &BasisSpec, mu0: f64, var0: f64) -> Result<DVector<f64>> {
    check_size(basis)?;
    match basis.family {
        BasisFamily::Hermite => Ok(DVector::from_vec(project_gaussian_adapted(coeff_table(), basis, mu0, var0)?)),
        BasisFamily::Gaussian => {
            if !(var0 > 0.0) {
                return Err(Error::InvalidArgument("initial variance must be positive".into()));
            }
            let (centers, w) = basis.gaussian_layout();
            let w2 = w * w;
            let s2 = var0 + w2;
            let rhs = DVector::from_iterator(
                basis.n,
                centers.iter().map(|c| {
                    let u = c - mu0;
                    (PI * w2).powf(-0.25) * (2.0 * PI * w2).sqrt() * (-0.5 * u * u / s2).exp()
                        / (2.0 * PI * s2).sqrt()
                }),
            );
            let gram = gaussian_gram(basis);
            Ok(GramFactor::new(&gram)?.solve_vec(&rhs))
        }
    }
}

/// Closed-form Gram matrix of the Gaussian-bump family.
pub fn gaussian_gram(basis: &BasisSpec) -> DMatrix<f64> {
    let (centers, w) = basis.gaussian_layout();
    DMatrix::from_fn(basis.n, basis.n, |i, j| {
        let u = centers[i] - centers[j];
        (-u * u / (4.0 * w * w)).exp()
    })
}

/// Coefficients of an arbitrary density by quadrature projection.
pub fn project_density<F: Fn(f64) -> f64>(q0: F, basis: &BasisSpec, rule: &QuadratureRule) -> Result<DVector<f64>> {
    check_size(basis)?;
    let scale = match basis.family {
        BasisFamily::Hermite => basis.sigma * std::f64::consts::SQRT_2,
        BasisFamily::Gaussian => 2.0 * basis.sigma,
    };
    let rhs = DVector::from_iterator(
        basis.n,
        (0..basis.n).map(|i| inner_product(&q0, |x| basis.eval_all(x)[i], rule, basis.mu, scale)),
    );
    if basis.is_orthonormal() {
        Ok(rhs)
    } else {
        Ok(GramFactor::new(&gaussian_gram(basis))?.solve_vec(&rhs))
    }
}

/// `B^ℓ = Q diag(λ^ℓ) Qᵀ` for every channel, so that
/// `exp(Σ B^ℓ dz_ℓ − ½ (B^ℓ)² dt) = Q diag(exp(Σ λ^ℓ dz_ℓ − ½ (λ^ℓ)² dt)) Qᵀ`.
#[derive(Debug, Clone)]
struct ObsSpectrum {
    q: DMatrix<f64>,
    eig: Vec<DVector<f64>>,
}

impl ObsSpectrum {
    /// `None` unless the matrices are symmetric and commute, which holds for
    /// affine observations in a Hermite tensor basis.
    fn new(b: &[DMatrix<f64>]) -> Option<Self> {
        let scale = b.iter().map(|m| m.amax()).fold(0.0, f64::max).max(1.0);
        let tol = 1e-11 * scale * scale;
        for (i, bi) in b.iter().enumerate() {
            if (bi - bi.transpose()).amax() > 1e-12 * scale {
                return None;
            }
            for bj in &b[i + 1..] {
                if (bi * bj - bj * bi).amax() > tol {
                    return None;
                }
            }
        }
        // a generic combination separates the joint eigenspaces
        let mut combo = b[0].clone();
        for (k, bk) in b.iter().enumerate().skip(1) {
            combo += bk * (1.0 + (k as f64) * std::f64::consts::FRAC_1_SQRT_2).sqrt();
        }
        let combo = (&combo + combo.transpose()) * 0.5;
        let q = nalgebra::SymmetricEigen::new(combo).eigenvectors;
        let eig: Vec<DVector<f64>> = b.iter().map(|bl| (q.transpose() * bl * &q).diagonal()).collect();
        // accept only if Q diagonalizes every channel
        for (bl, e) in b.iter().zip(&eig) {
            let back = &q * DMatrix::from_diagonal(e) * q.transpose();
            if (back - bl).amax() > 1e-9 * scale {
                return None;
            }
        }
        Some(ObsSpectrum { q, eig })
    }

    fn apply(&self, v: &DVector<f64>, dz: &[f64], dt: f64) -> DVector<f64> {
        let mut w = self.q.tr_mul(v);
        for (i, wi) in w.iter_mut().enumerate() {
            let g: f64 = self.eig.iter().zip(dz).map(|(e, z)| e[i] * z - 0.5 * e[i] * e[i] * dt).sum();
            *wi *= g.exp();
        }
        &self.q * w
    }
}

/// Precomputed stepping operators for one basis and time step.
#[derive(Debug, Clone)]
pub struct Propagator {
    method: Method,
    dt: f64,
    drift: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    half_b_sq: Vec<DMatrix<f64>>,
    c: DMatrix<f64>,
    jump: DMatrix<f64>,
    semigroup: Option<DMatrix<f64>>,
    /// joint eigenbasis of commuting symmetric observation matrices (SU only)
    spectral: Option<ObsSpectrum>,
    gram: Option<GramFactor>,
    /// scalar part `c_ℓ` taken out of each observation matrix (EM only)
    shift: Vec<f64>,
    renormalize: bool,
}

impl Propagator {
    pub fn new(mats: &CoefficientMatrices, method: Method, dt: f64, renormalize: bool) -> Result<Self> {
        if !(dt >= 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("time step must be nonnegative, got {dt}")));
        }
        let n = mats.size();
        let mut drift = &mats.a - &mats.c;
        let mut b = mats.b.clone();
        let mut shift = Vec::new();
        if method == Method::Em {
            // Rescaling the unnormalized density by exp(−cZ + ½c²t) turns B into
            // B − cD and adds −c(B − cD) to the drift without changing the
            // filter. Taking out the scalar part keeps the discarded Itô terms
            // small when the basis sits far from the origin.
            let trace_d = mats.d.trace();
            for bl in b.iter_mut() {
                let c = bl.trace() / trace_d;
                *bl -= &mats.d * c;
                drift -= &*bl * c;
                shift.push(c);
            }
        }
        let gram = if mats.orthonormal { None } else { Some(GramFactor::new(&mats.d)?) };
        if let Some(g) = &gram {
            log::debug!("Gram condition number {:.3e}", g.condition());
        }
        let semigroup = match method {
            Method::Em => None,
            Method::Su => {
                if !mats.orthonormal {
                    return Err(Error::InvalidArgument(
                        "the splitting-up stepper requires an orthonormal basis".into(),
                    ));
                }
                Some(matrix_exp(&(&drift * dt))?)
            }
        };
        let spectral = match method {
            Method::Su if !b.is_empty() => ObsSpectrum::new(&b),
            _ => None,
        };
        Ok(Propagator {
            method,
            dt,
            half_b_sq: if method == Method::Su && spectral.is_none() {
                b.iter().map(|b| 0.5 * (b * b)).collect()
            } else {
                Vec::new()
            },
            b,
            jump: DMatrix::identity(n, n) + &mats.c,
            c: mats.c.clone(),
            drift,
            semigroup,
            spectral,
            gram,
            shift,
            renormalize,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// One step; returns the new coefficients and the log of the factor
    /// removed by renormalization. Divergence errors carry step 0.
    pub fn step(&self, coeffs: &DVector<f64>, dz: &[f64], dn: u32) -> Result<(DVector<f64>, f64)> {
        if dz.len() != self.b.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} observation channels but {} increments",
                self.b.len(),
                dz.len()
            )));
        }
        let next = match self.method {
            Method::Em => {
                let mut inc = &self.drift * coeffs * self.dt;
                for (b, z) in self.b.iter().zip(dz) {
                    inc += b * coeffs * *z;
                }
                if dn > 0 {
                    inc += &self.c * coeffs * dn as f64;
                }
                if let Some(g) = &self.gram {
                    inc = g.solve_vec(&inc);
                }
                coeffs + inc
            }
            Method::Su => {
                let semigroup = self.semigroup.as_ref().expect("SU propagator has a semigroup");
                let mut v = semigroup * coeffs;
                if let Some(s) = &self.spectral {
                    v = s.apply(&v, dz, self.dt);
                } else if !self.b.is_empty() {
                    let n = coeffs.len();
                    let mut gen = DMatrix::zeros(n, n);
                    for ((b, hb), z) in self.b.iter().zip(&self.half_b_sq).zip(dz) {
                        gen += b * *z - hb * self.dt;
                    }
                    v = matrix_exp(&gen).map_err(|_| Error::Divergence { step: 0, t: 0.0 })? * v;
                }
                for _ in 0..dn {
                    v = &self.jump * v;
                }
                v
            }
        };
        let norm = next.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Divergence { step: 0, t: 0.0 });
        }
        let removed: f64 = self.shift.iter().zip(dz).map(|(c, z)| c * z - 0.5 * c * c * self.dt).sum();
        if self.renormalize {
            Ok((next / norm, norm.ln() + removed))
        } else {
            Ok((next * removed.exp(), 0.0))
        }
    }

    pub(crate) fn advance(&self, state: &mut FilterState, dz: &[f64], dn: u32) -> Result<()> {
        let (c, log) = self.step(&state.coeffs, dz, dn)?;
        state.coeffs = c;
        state.log_scale += log;
        state.t += self.dt;
        Ok(())
    }
}

/// One Euler–Maruyama step with per-step renormalization.
pub fn em_step(
    state: &FilterState,
    mats: &CoefficientMatrices,
    dz: &[f64],
    dn: u32,
    dt: f64,
) -> Result<FilterState> {
    let mut next = state.clone();
    Propagator::new(mats, Method::Em, dt, true)?
        .advance(&mut next, dz, dn)
        .map_err(|e| e.at_step(0, state.t))?;
    Ok(next)
}

/// One splitting-up step given the precomputed `exp((A − C) dt)`.
pub fn su_step(
    state: &FilterState,
    mats: &CoefficientMatrices,
    precomp: &DMatrix<f64>,
    dz: &[f64],
    dn: u32,
    dt: f64,
) -> Result<FilterState> {
    if !mats.orthonormal {
        return Err(Error::InvalidArgument("the splitting-up stepper requires an orthonormal basis".into()));
    }
    let n = mats.size();
    let prop = Propagator {
        method: Method::Su,
        dt,
        drift: &mats.a - &mats.c,
        b: mats.b.clone(),
        half_b_sq: mats.b.iter().map(|b| 0.5 * (b * b)).collect(),
        c: mats.c.clone(),
        jump: DMatrix::identity(n, n) + &mats.c,
        semigroup: Some(precomp.clone()),
        spectral: None,
        gram: None,
        shift: Vec::new(),
        renormalize: true,
    };
    let mut next = state.clone();
    prop.advance(&mut next, dz, dn).map_err(|e| e.at_step(0, state.t))?;
    Ok(next)
}

/// Runs a fixed-basis filter over a path, returning one estimate per grid point.
pub fn run_filter(
    spec: &ModelSpec,
    basis: &BasisSpec,
    method: Method,
    bundle: &PathBundle,
    q0_coeffs: &DVector<f64>,
) -> Result<Vec<FilterEstimate>> {
    run_filter_with(spec, basis, method, bundle, q0_coeffs, &FilterOptions::default())
}

pub fn run_filter_with(
    spec: &ModelSpec,
    basis: &BasisSpec,
    method: Method,
    bundle: &PathBundle,
    q0_coeffs: &DVector<f64>,
    opts: &FilterOptions,
) -> Result<Vec<FilterEstimate>> {
    check_bundle(spec, bundle)?;
    FixedFilter::new(spec, basis, method, bundle.dt, opts)?.run(bundle, q0_coeffs)
}

/// A fixed-basis filter with its matrices assembled, ready to run over paths
/// with a given time step.
pub struct FixedFilter {
    basis: BasisSpec,
    prop: Propagator,
    cache: BasisCache,
}

impl FixedFilter {
    pub fn new(spec: &ModelSpec, basis: &BasisSpec, method: Method, dt: f64, opts: &FilterOptions) -> Result<Self> {
        let mats = assemble(spec, basis, opts.quad_nodes)?;
        Ok(FixedFilter {
            basis: *basis,
            prop: Propagator::new(&mats, method, dt, opts.renormalize)?,
            cache: BasisCache::new(basis, opts.neg_mass)?,
        })
    }

    pub fn run(&self, bundle: &PathBundle, q0_coeffs: &DVector<f64>) -> Result<Vec<FilterEstimate>> {
        if q0_coeffs.len() != self.basis.n {
            return Err(Error::ShapeMismatch(format!(
                "{} initial coefficients for a basis of size {}",
                q0_coeffs.len(),
                self.basis.n
            )));
        }
        if bundle.steps() > 0 && (bundle.dt - self.prop.dt).abs() > 1e-12 * self.prop.dt {
            return Err(Error::InvalidArgument(format!(
                "filter prepared for dt = {} but the path has dt = {}",
                self.prop.dt, bundle.dt
            )));
        }
        let mut state = FilterState { coeffs: q0_coeffs.clone(), log_scale: 0.0, basis: self.basis, t: 0.0 };
        let mut out = Vec::with_capacity(bundle.steps() + 1);
        out.push(self.cache.estimate(&state, false)?);
        for k in 0..bundle.steps() {
            let t = bundle.times[k + 1];
            let (coeffs, log) = self.prop.step(&state.coeffs, &bundle.dz[k], bundle.dn[k]).map_err(|e| e.at_step(k + 1, t))?;
            state.coeffs = coeffs;
            state.log_scale += log;
            state.t = t;
            out.push(self.cache.estimate(&state, false).map_err(|e| e.at_step(k + 1, t))?);
        }
        Ok(out)
    }
}

pub(crate) fn check_bundle(spec: &ModelSpec, bundle: &PathBundle) -> Result<()> {
    if bundle.dz.len() != bundle.dn.len() || bundle.times.len() != bundle.dn.len() + 1 {
        return Err(Error::ShapeMismatch("path bundle has inconsistent lengths".into()));
    }
    if bundle.dz.iter().any(|z| z.len() != spec.dim_z) {
        return Err(Error::ShapeMismatch(format!(
            "path bundle has observation increments of the wrong width (expected {})",
            spec.dim_z
        )));
    }
    if bundle.steps() > 0 && !(bundle.dt > 0.0) {
        return Err(Error::InvalidArgument("path bundle needs a positive time step".into()));
    }
    Ok(())
}

/// Writes estimates as CSV: `t, mean, variance, log_scale, neg_mass_fraction,
/// rebased, mu_basis, sigma_basis` in one dimension, per-axis columns
/// `mean_k`, `var_k`, `mu_basis_k`, `sigma_basis_k` otherwise.
pub fn write_estimates_csv<W: Write>(estimates: &[FilterEstimate], writer: W) -> Result<()> {
    let d = estimates.first().map_or(1, |e| e.mean.len());
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    let mut header = vec!["t".to_string()];
    if d == 1 {
        header.extend(["mean", "variance"].map(String::from));
    } else {
        header.extend((1..=d).map(|k| format!("mean_{k}")));
        header.extend((1..=d).map(|k| format!("var_{k}")));
    }
    header.extend(["log_scale", "neg_mass_fraction", "rebased"].map(String::from));
    if d == 1 {
        header.extend(["mu_basis", "sigma_basis"].map(String::from));
    } else {
        header.extend((1..=d).map(|k| format!("mu_basis_{k}")));
        header.extend((1..=d).map(|k| format!("sigma_basis_{k}")));
    }
    w.write_record(&header).map_err(err)?;
    for e in estimates {
        let mut row = vec![fmt_f64(e.t)];
        row.extend(e.mean.iter().chain(&e.variance).map(|v| fmt_f64(*v)));
        row.push(fmt_f64(e.log_scale));
        row.push(fmt_f64(e.neg_mass_fraction));
        row.push(if e.rebased { "1" } else { "0" }.into());
        row.extend(e.mu_basis.iter().chain(&e.sigma_basis).map(|v| fmt_f64(*v)));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_linear_model, LinearModelParams};
    use approx::assert_abs_diff_eq;

    fn unit_state(n: usize, basis: BasisSpec) -> FilterState {
        let mut coeffs = DVector::zeros(n);
        coeffs[0] = 1.0;
        FilterState { coeffs, log_scale: 0.0, basis, t: 0.0 }
    }

    #[test]
    fn kalman_entries() {
        let p = LinearModelParams::paper_defaults(5.5, 10.0);
        let m = kalman_matrices(6, &p).unwrap();
        assert_abs_diff_eq!(m.a[(0, 0)], -0.75, epsilon = 1e-14);
        assert_abs_diff_eq!(m.a[(1, 1)], -1.75, epsilon = 1e-14);
        assert_abs_diff_eq!(m.a[(2, 2)], -2.75, epsilon = 1e-14);
        assert_abs_diff_eq!(m.b[0][(0, 1)], 5.5, epsilon = 1e-14);
        assert_abs_diff_eq!(m.b[0][(1, 0)], 5.5, epsilon = 1e-14);
        assert_abs_diff_eq!(m.b[0][(1, 2)], 7.77817, epsilon = 1e-5);
        assert_abs_diff_eq!(m.c[(0, 0)], 9.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.c[(1, 1)], 29.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.c[(0, 2)], 14.14214, epsilon = 1e-5);
        assert_abs_diff_eq!(m.c[(2, 0)], 14.14214, epsilon = 1e-5);
    }

    #[test]
    fn unit_vector_moments() {
        let t = coeff_table();
        let s = unit_state(4, BasisSpec::hermite(4).unwrap());
        let e = conditional_moments(&s, t).unwrap();
        assert_abs_diff_eq!(e.mean1(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.var1(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(density_eval(&s, 0.0).unwrap(), (4.0 * PI).powf(-0.5), epsilon = 1e-12);

        let shifted = unit_state(4, BasisSpec::new(BasisFamily::Hermite, 4, 5.0, 1.0).unwrap());
        assert_abs_diff_eq!(conditional_moments(&shifted, t).unwrap().mean1(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn projected_normal_moments() {
        let basis = BasisSpec::hermite(20).unwrap();
        let coeffs = gaussian_coefficients(&basis, 0.0, 1.0).unwrap();
        let s = FilterState { coeffs, log_scale: 0.0, basis, t: 0.0 };
        let e = conditional_moments(&s, coeff_table()).unwrap();
        assert_abs_diff_eq!(e.mean1(), 0.0, epsilon = 1e-8);
        // the kernel e^{-x²/4} cannot carry e^{-x²/2} exactly; truncation at n = 20
        assert_abs_diff_eq!(e.var1(), 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(density_eval(&s, 0.0).unwrap(), 0.39894, epsilon = 1e-3);
    }

    #[test]
    fn zero_state_is_degenerate() {
        let basis = BasisSpec::hermite(3).unwrap();
        let s = FilterState { coeffs: DVector::from_vec(vec![0.0, 1.0, 0.0]), log_scale: 0.0, basis, t: 0.0 };
        assert!(matches!(conditional_moments(&s, coeff_table()), Err(Error::DegenerateState { .. })));
    }

    #[test]
    fn quadrature_matches_kalman_small() {
        let p = LinearModelParams::paper_defaults(5.5, 10.0);
        let spec = make_linear_model(&p).unwrap();
        let basis = BasisSpec::hermite(6).unwrap();
        let q = assemble_quadrature(&spec, &basis, &gauss_hermite(60).unwrap()).unwrap();
        let k = kalman_matrices(6, &p).unwrap();
        assert!((&q.a - &k.a).amax() < 1e-8);
        assert!((&q.b[0] - &k.b[0]).amax() < 1e-8);
        assert!((&q.c - &k.c).amax() < 1e-8);
        assert!((&q.d - &k.d).amax() < 1e-8);
    }

    #[test]
    fn scalar_em_update() {
        let basis = BasisSpec::hermite(1).unwrap();
        let mats = CoefficientMatrices {
            a: DMatrix::from_element(1, 1, 0.7),
            b: vec![DMatrix::from_element(1, 1, 2.0)],
            c: DMatrix::from_element(1, 1, 0.5),
            d: DMatrix::identity(1, 1),
            basis: MatrixBasis::Line(basis),
            orthonormal: true,
        };
        let s = FilterState { coeffs: DVector::from_element(1, 3.0), log_scale: 0.0, basis, t: 0.0 };
        let next = em_step(&s, &mats, &[0.1], 1, 0.01).unwrap();
        // the scalar observation matrix is taken out exactly: exp(β dz − ½β² dt)
        let factor: f64 = (1.0 + 0.2 * 0.01 + 0.5) * (2.0 * 0.1 - 0.5 * 4.0 * 0.01f64).exp();
        assert_abs_diff_eq!(next.coeffs[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(next.log_scale, (3.0 * factor).ln(), epsilon = 1e-14);
        let same = em_step(&s, &mats, &[0.0], 0, 0.0).unwrap();
        assert_abs_diff_eq!(same.log_scale, 3f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn spectral_observation_factor_matches_dense() {
        use crate::model::{AffineStructure, QuadraticIntensity};
        use crate::multidim::{affine_tensor_matrices, TensorBasisSpec};
        let structure = AffineStructure {
            drift: DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, -0.4]),
            drift_offset: DVector::from_column_slice(&[0.1, 0.0]),
            diffusion: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.7]),
            obs: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -1.0, 1.5]),
            obs_offset: DVector::from_column_slice(&[0.3, -0.2]),
            intensity: Some(QuadraticIntensity { base: 0.5, diag: DVector::from_column_slice(&[0.2, 0.1]) }),
        };
        let basis = TensorBasisSpec::new(5, vec![1.0, -0.5], vec![0.8, 1.2]).unwrap();
        let mats = affine_tensor_matrices(&structure, &basis).unwrap();
        let prop = Propagator::new(&mats, Method::Su, 1e-2, false).unwrap();
        assert!(prop.spectral.is_some());
        let v = DVector::from_fn(25, |i, _| ((i * 7 % 11) as f64 - 5.0) / 3.0);
        let dz = [0.13, -0.07];
        let mut gen = DMatrix::zeros(25, 25);
        for (b, z) in mats.b.iter().zip(&dz) {
            gen += b * *z - (b * b) * (0.5 * 1e-2);
        }
        let dense = matrix_exp(&gen).unwrap() * &v;
        let spectral = prop.spectral.as_ref().unwrap().apply(&v, &dz, 1e-2);
        assert!((dense - spectral).amax() < 1e-10);
    }

    #[test]
    fn su_scalar_factors() {
        let basis = BasisSpec::hermite(2).unwrap();
        let z = DMatrix::zeros(2, 2);
        let beta = 1.5;
        let mats = CoefficientMatrices {
            a: z.clone(),
            b: vec![DMatrix::identity(2, 2) * beta],
            c: z.clone(),
            d: DMatrix::identity(2, 2),
            basis: MatrixBasis::Line(basis),
            orthonormal: true,
        };
        let s = FilterState { coeffs: DVector::from_vec(vec![0.6, 0.8]), log_scale: 0.0, basis, t: 0.0 };
        let (dz, dt) = (0.2, 0.01);
        let next = su_step(&s, &mats, &DMatrix::identity(2, 2), &[dz], 0, dt).unwrap();
        assert_abs_diff_eq!(next.log_scale, beta * dz - 0.5 * beta * beta * dt, epsilon = 1e-13);
        assert!((&next.coeffs - &s.coeffs).amax() < 1e-14);

        let jump = CoefficientMatrices {
            b: vec![z.clone()],
            c: DMatrix::identity(2, 2) * 0.5,
            ..mats
        };
        let next = su_step(&s, &jump, &DMatrix::identity(2, 2), &[0.0], 2, dt).unwrap();
        assert_abs_diff_eq!(next.log_scale, 2.0 * 1.5f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn empty_bundle_returns_initial_estimate() {
        let p = LinearModelParams::paper_defaults(5.5, 10.0);
        let spec = make_linear_model(&p).unwrap();
        let basis = BasisSpec::new(BasisFamily::Hermite, 8, 5.0, 0.1).unwrap();
        let q0 = initial_coefficients(&spec, &basis).unwrap();
        let bundle = PathBundle::empty(1e-3, vec![5.0]);
        let direct = conditional_moments(
            &FilterState { coeffs: q0.clone(), log_scale: 0.0, basis: basis.clone(), t: 0.0 },
            coeff_table(),
        )
        .unwrap();
        let out = run_filter(&spec, &basis, Method::Su, &bundle, &q0).unwrap();
        assert_eq!(out.len(), 1);
        assert_abs_diff_eq!(out[0].mean1(), 5.0, epsilon = 1e-10);
        assert_abs_diff_eq!(out[0].var1(), direct.var1(), epsilon = 1e-12);
        assert!((out[0].var1() / 0.01 - 1.0).abs() < 0.15);
    }

    #[test]
    fn su_rejects_gaussian_family() {
        let p = LinearModelParams::paper_defaults(5.5, 10.0);
        let spec = make_linear_model(&p).unwrap();
        let basis = BasisSpec::new(BasisFamily::Gaussian, 8, 5.0, 1.0).unwrap();
        let m = assemble(&spec, &basis, None).unwrap();
        assert!(Propagator::new(&m, Method::Su, 1e-3, true).is_err());
        assert!(Propagator::new(&m, Method::Em, 1e-3, true).is_ok());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("su".parse::<Method>().unwrap(), Method::Su);
        assert_eq!("EM".parse::<Method>().unwrap(), Method::Em);
        assert!("rk4".parse::<Method>().is_err());
    }
}
