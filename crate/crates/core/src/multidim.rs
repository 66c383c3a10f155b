//! Tensor-product Hermite bases for `d`-dimensional signals.
//!
//! Basis functions are `e_{i_1} ⊗ … ⊗ e_{i_d}` with per-axis location and
//! scale; the flat index is row-major with the first axis most significant,
//! which matches `nalgebra`'s Kronecker product.

use nalgebra::{DMatrix, DVector};

use crate::adaptive::{axis_needs_rebase, transition_matrix, AgaConfig};
use crate::error::{Error, Result};
use crate::galerkin::{
    assemble_quadrature, check_bundle, gaussian_coefficients, moments_from_raw, raw_moments, BasisCache,
    CoefficientMatrices, FilterEstimate, FilterOptions, MatrixBasis, Method, MomentWeights, Propagator,
    MAX_BASIS_SIZE,
};
use crate::hermite::{AxisOperators, BasisFamily, BasisSpec};
use crate::model::{AffineStructure, ModelSpec, PathBundle};
use crate::numerics::{gauss_hermite, QuadratureRule};

/// Largest dense tensor basis (`6^5`).
pub const MAX_TENSOR_SIZE: usize = 7776;

/// Full tensor Hermite basis with `n_per_dim` functions per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBasisSpec {
    pub d: usize,
    pub n_per_dim: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl TensorBasisSpec {
    pub fn new(n_per_dim: usize, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 || sigma.len() != d {
            return Err(Error::ShapeMismatch("tensor basis needs matching, nonempty mu and sigma".into()));
        }
        if n_per_dim == 0 || n_per_dim > MAX_BASIS_SIZE {
            return Err(Error::InvalidArgument(format!("n_per_dim must be in 1..={MAX_BASIS_SIZE}")));
        }
        for (m, s) in mu.iter().zip(&sigma) {
            BasisSpec::new(BasisFamily::Hermite, n_per_dim, *m, *s)?;
        }
        let size = n_per_dim
            .checked_pow(d as u32)
            .filter(|&m| m <= MAX_TENSOR_SIZE)
            .ok_or(Error::TooLarge { m: n_per_dim.saturating_pow(d as u32), max: MAX_TENSOR_SIZE })?;
        debug_assert!(size >= 1);
        Ok(TensorBasisSpec { d, n_per_dim, mu, sigma })
    }

    /// Unadapted basis on `ℝ^d`.
    pub fn unadapted(d: usize, n_per_dim: usize) -> Result<Self> {
        Self::new(n_per_dim, vec![0.0; d], vec![1.0; d])
    }

    /// The one-dimensional basis as a tensor basis with `d = 1`.
    pub fn from_line(basis: &BasisSpec) -> Self {
        TensorBasisSpec { d: 1, n_per_dim: basis.n, mu: vec![basis.mu], sigma: vec![basis.sigma] }
    }

    /// Total number of basis functions `n^d`.
    pub fn size(&self) -> usize {
        self.n_per_dim.pow(self.d as u32)
    }

    /// The Hermite basis along axis `a`.
    pub fn axis(&self, a: usize) -> BasisSpec {
        BasisSpec { family: BasisFamily::Hermite, n: self.n_per_dim, mu: self.mu[a], sigma: self.sigma[a] }
    }

    /// 0-based digits of a 0-based flat index.
    fn digits(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.d];
        for a in (0..self.d).rev() {
            out[a] = flat % self.n_per_dim;
            flat /= self.n_per_dim;
        }
        out
    }
}

/// 1-based flat index of a 1-based multi-index.
pub fn tensor_index(spec: &TensorBasisSpec, multi: &[usize]) -> Result<usize> {
    if multi.len() != spec.d {
        return Err(Error::ShapeMismatch(format!("multi-index of length {} for d = {}", multi.len(), spec.d)));
    }
    let mut flat = 0;
    for &i in multi {
        if i == 0 || i > spec.n_per_dim {
            return Err(Error::IndexOutOfRange { index: i, n: spec.n_per_dim });
        }
        flat = flat * spec.n_per_dim + (i - 1);
    }
    Ok(flat + 1)
}

/// Inverse of [`tensor_index`].
pub fn tensor_multi_index(spec: &TensorBasisSpec, flat: usize) -> Result<Vec<usize>> {
    if flat == 0 || flat > spec.size() {
        return Err(Error::IndexOutOfRange { index: flat, n: spec.size() });
    }
    Ok(spec.digits(flat - 1).into_iter().map(|i| i + 1).collect())
}

/// Value of the tensor basis function with 1-based flat index at `x`.
pub fn tensor_basis_eval(spec: &TensorBasisSpec, flat: usize, x: &[f64]) -> Result<f64> {
    let multi = tensor_multi_index(spec, flat)?;
    if x.len() != spec.d {
        return Err(Error::ShapeMismatch(format!("point of dimension {} for d = {}", x.len(), spec.d)));
    }
    let mut v = 1.0;
    for (a, &i) in multi.iter().enumerate() {
        v *= crate::hermite::basis_eval(&spec.axis(a), i, x[a])?;
    }
    Ok(v)
}

fn kron_axes(ops: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = ops[0].clone();
    for op in &ops[1..] {
        acc = acc.kronecker(op);
    }
    acc
}

/// Per-axis operators in the adapted `x` coordinates of one axis.
struct XOps {
    x: DMatrix<f64>,
    x2: DMatrix<f64>,
    dx: DMatrix<f64>,
    d2x: DMatrix<f64>,
    xdx: DMatrix<f64>,
}

impl XOps {
    fn new(ops: &AxisOperators, mu: f64, sigma: f64) -> Self {
        let n = ops.n();
        let id = DMatrix::<f64>::identity(n, n);
        XOps {
            x: &id * mu + &ops.y * sigma,
            x2: &id * (mu * mu) + &ops.y * (2.0 * mu * sigma) + &ops.y2 * (sigma * sigma),
            dx: &ops.dy / sigma,
            d2x: &ops.d2 / (sigma * sigma),
            xdx: &ops.dy * (mu / sigma) + &ops.ydy,
        }
    }
}

/// Closed-form matrices of an affine model in a tensor Hermite basis, built
/// from Kronecker products of per-axis operators:
///
/// `A = Σ_a c_a ∂_a + Σ_{a,b} B_ab x_b ∂_a + ½ Σ_{a,b} a_ab ∂_a ∂_b`,
/// `B^ℓ = h0_ℓ + Σ_b H_ℓb x_b`, `C = λ0 − 1 + Σ_a λ_a x_a²` (`C = −I` without
/// a point process), `D = I`.
pub fn affine_tensor_matrices(structure: &AffineStructure, basis: &TensorBasisSpec) -> Result<CoefficientMatrices> {
    let d = basis.d;
    if structure.dim_x() != d {
        return Err(Error::ShapeMismatch(format!(
            "model of dimension {} in a basis of dimension {d}",
            structure.dim_x()
        )));
    }
    let n = basis.n_per_dim;
    let m = basis.size();
    let ops = AxisOperators::new(n);
    let id = DMatrix::<f64>::identity(n, n);
    let axes: Vec<XOps> = (0..d).map(|a| XOps::new(&ops, basis.mu[a], basis.sigma[a])).collect();

    // Kronecker product with `op_a` on axis a and `op_b` on axis b (a ≠ b)
    let place = |entries: &[(usize, &DMatrix<f64>)]| -> DMatrix<f64> {
        let list: Vec<&DMatrix<f64>> = (0..d)
            .map(|k| entries.iter().find(|(a, _)| *a == k).map_or(&id, |(_, op)| *op))
            .collect();
        kron_axes(&list)
    };

    let cov = structure.diffusion_cov();
    let mut a_mat = DMatrix::<f64>::zeros(m, m);
    for a in 0..d {
        let c = structure.drift_offset[a];
        if c != 0.0 {
            a_mat += place(&[(a, &axes[a].dx)]) * c;
        }
        for b in 0..d {
            let coef = structure.drift[(a, b)];
            if coef != 0.0 {
                let term =
                    if a == b { place(&[(a, &axes[a].xdx)]) } else { place(&[(a, &axes[a].dx), (b, &axes[b].x)]) };
                a_mat += term * coef;
            }
            let diff = 0.5 * cov[(a, b)];
            if diff != 0.0 {
                let term =
                    if a == b { place(&[(a, &axes[a].d2x)]) } else { place(&[(a, &axes[a].dx), (b, &axes[b].dx)]) };
                a_mat += term * diff;
            }
        }
    }

    let eye = DMatrix::<f64>::identity(m, m);
    let b_mats = (0..structure.obs.nrows())
        .map(|l| {
            let mut bl = &eye * structure.obs_offset[l];
            for b in 0..d {
                let coef = structure.obs[(l, b)];
                if coef != 0.0 {
                    bl += place(&[(b, &axes[b].x)]) * coef;
                }
            }
            bl
        })
        .collect();

    let c_mat = match &structure.intensity {
        None => -&eye,
        Some(q) => {
            let mut c = &eye * (q.base - 1.0);
            for a in 0..d {
                if q.diag[a] != 0.0 {
                    c += place(&[(a, &axes[a].x2)]) * q.diag[a];
                }
            }
            c
        }
    };

    Ok(CoefficientMatrices {
        a: a_mat,
        b: b_mats,
        c: c_mat,
        d: eye,
        basis: MatrixBasis::Tensor(basis.clone()),
        orthonormal: true,
    })
}

/// Tensor assembly: closed forms when the model declares affine structure,
/// tensor Gauss–Hermite quadrature otherwise.
pub fn assemble_md(spec: &ModelSpec, basis: &TensorBasisSpec, rule: &QuadratureRule) -> Result<CoefficientMatrices> {
    match spec.affine() {
        Some(structure) => affine_tensor_matrices(structure, basis),
        None => assemble_md_quadrature(spec, basis, rule),
    }
}

/// Largest number of (node, entry) pairs the quadrature assembly will visit.
const MAX_QUADRATURE_WORK: f64 = 2e9;

/// Entries by `d`-dimensional tensor Gauss–Hermite quadrature.
pub fn assemble_md_quadrature(
    spec: &ModelSpec,
    basis: &TensorBasisSpec,
    rule: &QuadratureRule,
) -> Result<CoefficientMatrices> {
    let d = basis.d;
    if spec.dim_x != d {
        return Err(Error::ShapeMismatch(format!("model of dimension {} in a basis of dimension {d}", spec.dim_x)));
    }
    if d == 1 {
        let mut m = assemble_quadrature(spec, &basis.axis(0), rule)?;
        m.basis = MatrixBasis::Tensor(basis.clone());
        return Ok(m);
    }
    let n = basis.n_per_dim;
    let m = basis.size();
    let q = rule.len();
    let nodes_total = q.pow(d as u32);
    let work = nodes_total as f64 * (m * m) as f64;
    if work > MAX_QUADRATURE_WORK {
        return Err(Error::TooLarge { m, max: MAX_TENSOR_SIZE });
    }
    let l = spec.dim_z;
    let digits: Vec<Vec<usize>> = (0..m).map(|f| basis.digits(f)).collect();
    let mapped: Vec<Vec<(f64, f64)>> = (0..d).map(|a| rule.mapped(basis.mu[a], basis.sigma[a]).collect()).collect();
    let axis_vals: Vec<Vec<crate::hermite::BasisValues>> = (0..d)
        .map(|a| mapped[a].iter().map(|(x, _)| basis.axis(a).eval_with_derivatives(*x)).collect())
        .collect();

    let mut a_mat = DMatrix::<f64>::zeros(m, m);
    let mut b_mats = vec![DMatrix::<f64>::zeros(m, m); l];
    let mut c_mat = DMatrix::<f64>::zeros(m, m);
    let mut d_mat = DMatrix::<f64>::zeros(m, m);
    let mut drift = vec![0.0; d];
    let mut cov = vec![0.0; d * d];
    let mut h = vec![0.0; l];
    let mut x = vec![0.0; d];
    let mut node = vec![0usize; d];
    let mut val = vec![0.0; m];
    let mut gen = vec![0.0; m];
    for k in 0..nodes_total {
        let mut rem = k;
        for a in (0..d).rev() {
            node[a] = rem % q;
            rem /= q;
        }
        let mut w = 1.0;
        for a in 0..d {
            x[a] = mapped[a][node[a]].0;
            w *= mapped[a][node[a]].1;
        }
        if w == 0.0 {
            continue;
        }
        spec.drift(&x, &mut drift);
        spec.diffusion_cov(&x, &mut cov);
        spec.obs(&x, &mut h);
        let lam1 = if spec.has_point_process() { spec.intensity(&x) } else { 0.0 } - 1.0;
        for f in 0..m {
            let ids = &digits[f];
            let vals: Vec<&crate::hermite::BasisValues> = (0..d).map(|a| &axis_vals[a][node[a]]).collect();
            let prod_except = |skip: &[usize]| -> f64 {
                (0..d).filter(|a| !skip.contains(a)).map(|a| vals[a].value[ids[a]]).product()
            };
            val[f] = prod_except(&[]);
            let mut g = 0.0;
            for a in 0..d {
                g += drift[a] * vals[a].d1[ids[a]] * prod_except(&[a]);
                for b in 0..d {
                    let second = if a == b {
                        vals[a].d2[ids[a]] * prod_except(&[a])
                    } else {
                        vals[a].d1[ids[a]] * vals[b].d1[ids[b]] * prod_except(&[a, b])
                    };
                    g += 0.5 * cov[a * d + b] * second;
                }
            }
            gen[f] = g;
        }
        for j in 0..m {
            for i in 0..m {
                let wi = w * val[i];
                a_mat[(j, i)] += wi * gen[j];
                let prod = wi * val[j];
                d_mat[(j, i)] += prod;
                c_mat[(j, i)] += prod * lam1;
                for (bl, hl) in b_mats.iter_mut().zip(&h) {
                    bl[(j, i)] += prod * hl;
                }
            }
        }
    }
    let _ = n;
    Ok(CoefficientMatrices {
        a: a_mat,
        b: b_mats,
        c: c_mat,
        d: d_mat,
        basis: MatrixBasis::Tensor(basis.clone()),
        orthonormal: true,
    })
}

/// Products of per-axis moment weights over the tensor basis.
#[derive(Debug, Clone)]
pub(crate) struct TensorMoments {
    w0: Vec<f64>,
    /// per axis `[x_a^0 … , x_a, x_a²]` weights; index 0 unused
    per_axis: Vec<[Vec<f64>; 3]>,
    line: Option<BasisCache>,
}

impl TensorMoments {
    pub fn new(basis: &TensorBasisSpec, neg_mass: bool) -> Result<Self> {
        let d = basis.d;
        let m = basis.size();
        let axis_w: Vec<MomentWeights> =
            (0..d).map(|a| MomentWeights::for_basis(&basis.axis(a))).collect::<Result<_>>()?;
        let digits: Vec<Vec<usize>> = (0..m).map(|f| basis.digits(f)).collect();
        let product = |target: usize, power: usize| -> Vec<f64> {
            digits
                .iter()
                .map(|ids| {
                    let mut p = 1.0;
                    for a in 0..d {
                        let j = if a == target { power } else { 0 };
                        p *= axis_w[a].w[j][ids[a]];
                    }
                    p
                })
                .collect()
        };
        let w0 = product(usize::MAX, 0);
        let per_axis = (0..d).map(|a| [Vec::new(), product(a, 1), product(a, 2)]).collect();
        let line = if d == 1 && neg_mass { Some(BasisCache::new(&basis.axis(0), true)?) } else { None };
        Ok(TensorMoments { w0, per_axis, line })
    }

    pub fn estimate(&self, state: &TensorState, rebased: bool) -> Result<FilterEstimate> {
        let d = state.basis.d;
        let mut mean = Vec::with_capacity(d);
        let mut variance = Vec::with_capacity(d);
        let mut sign = 1.0;
        for a in 0..d {
            let raw = raw_moments(&state.coeffs, &self.w0, &self.per_axis[a][1], &self.per_axis[a][2])?;
            sign = raw[0].signum();
            let (m, v) = moments_from_raw(raw);
            mean.push(m);
            variance.push(v);
        }
        let neg = self.line.as_ref().map_or(f64::NAN, |c| c.neg_mass_fraction(&state.coeffs, sign));
        Ok(FilterEstimate {
            t: state.t,
            mean,
            variance,
            log_scale: state.log_scale,
            neg_mass_fraction: neg,
            rebased,
            mu_basis: state.basis.mu.clone(),
            sigma_basis: state.basis.sigma.clone(),
        })
    }
}

/// Coefficient vector over a tensor basis.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorState {
    pub coeffs: DVector<f64>,
    pub log_scale: f64,
    pub basis: TensorBasisSpec,
    pub t: f64,
}

/// Conditional per-axis means and variances of a tensor state.
pub fn conditional_moments_md(state: &TensorState) -> Result<FilterEstimate> {
    TensorMoments::new(&state.basis, false)?.estimate(state, false)
}

/// Coefficients of the model's Gaussian initial law; the covariance must be diagonal.
pub fn initial_coefficients_md(spec: &ModelSpec, basis: &TensorBasisSpec) -> Result<DVector<f64>> {
    let d = basis.d;
    if spec.dim_x != d {
        return Err(Error::ShapeMismatch("initial law and basis dimensions differ".into()));
    }
    let off_diag = (0..d).flat_map(|a| (0..d).filter(move |&b| b != a).map(move |b| (a, b)));
    if off_diag.clone().any(|(a, b)| spec.cov0[(a, b)].abs() > 1e-14) {
        return Err(Error::InvalidArgument(
            "tensor projection of the initial law needs a diagonal covariance".into(),
        ));
    }
    let per_axis: Vec<DVector<f64>> = (0..d)
        .map(|a| gaussian_coefficients(&basis.axis(a), spec.mu0[a], spec.cov0[(a, a)]))
        .collect::<Result<_>>()?;
    let m = basis.size();
    Ok(DVector::from_iterator(
        m,
        (0..m).map(|f| {
            let ids = basis.digits(f);
            let mut p = 1.0;
            for a in 0..d {
                p *= per_axis[a][ids[a]];
            }
            p
        }),
    ))
}

/// Applies `T` along one axis of a coefficient tensor: `ψ'[…i…] = Σ_j T[(i, j)] ψ[…j…]`.
pub(crate) fn apply_axis(psi: &DVector<f64>, n: usize, d: usize, axis: usize, t: &DMatrix<f64>) -> DVector<f64> {
    let stride = n.pow((d - 1 - axis) as u32);
    let outer = n.pow(axis as u32);
    let mut out = DVector::zeros(psi.len());
    let mut v = vec![0.0; n];
    for o in 0..outer {
        for r in 0..stride {
            let base = o * n * stride + r;
            for (j, vj) in v.iter_mut().enumerate() {
                *vj = psi[base + j * stride];
            }
            for i in 0..n {
                let mut s = 0.0;
                for (j, vj) in v.iter().enumerate() {
                    s += t[(i, j)] * vj;
                }
                out[base + i * stride] = s;
            }
        }
    }
    out
}

/// Fixed-basis filter on a tensor basis, starting from the projected initial law.
pub fn run_filter_md(
    spec: &ModelSpec,
    basis: &TensorBasisSpec,
    method: Method,
    bundle: &PathBundle,
) -> Result<Vec<FilterEstimate>> {
    let q0 = initial_coefficients_md(spec, basis)?;
    run_driver_md(spec, basis, method, bundle, &q0, None, &FilterOptions::default()).map(|r| r.0)
}

/// Adaptive tensor filter: per-axis relocation of the basis.
pub fn run_aga_md(
    spec: &ModelSpec,
    basis0: &TensorBasisSpec,
    method: Method,
    bundle: &PathBundle,
    cfg: &AgaConfig,
    opts: &FilterOptions,
) -> Result<Vec<FilterEstimate>> {
    let q0 = initial_coefficients_md(spec, basis0)?;
    run_driver_md(spec, basis0, method, bundle, &q0, Some(cfg), opts).map(|r| r.0)
}

/// Basis located at the initial law: mean and per-axis standard deviation.
pub fn initial_tensor_basis(spec: &ModelSpec, n_per_dim: usize) -> Result<TensorBasisSpec> {
    TensorBasisSpec::new(
        n_per_dim,
        spec.mu0.iter().copied().collect(),
        (0..spec.dim_x).map(|a| spec.cov0[(a, a)].sqrt()).collect(),
    )
}

pub(crate) fn run_driver_md(
    spec: &ModelSpec,
    basis0: &TensorBasisSpec,
    method: Method,
    bundle: &PathBundle,
    q0: &DVector<f64>,
    adapt: Option<&AgaConfig>,
    opts: &FilterOptions,
) -> Result<(Vec<FilterEstimate>, TensorState)> {
    if q0.len() != basis0.size() {
        return Err(Error::ShapeMismatch(format!(
            "{} initial coefficients for a basis of size {}",
            q0.len(),
            basis0.size()
        )));
    }
    if let Some(cfg) = adapt {
        cfg.validate()?;
    }
    check_bundle(spec, bundle)?;
    let rule = match spec.affine() {
        Some(_) => None,
        None => Some(gauss_hermite(
            opts.quad_nodes.unwrap_or_else(|| {
                let nodes = crate::numerics::default_nodes(basis0.n_per_dim);
                if basis0.d == 1 { nodes } else { nodes.min(40) }
            }),
        )?),
    };
    let assemble = |b: &TensorBasisSpec| -> Result<CoefficientMatrices> {
        match &rule {
            None => affine_tensor_matrices(spec.affine().expect("affine model"), b),
            Some(r) => assemble_md_quadrature(spec, b, r),
        }
    };
    let proj_rule = match adapt {
        Some(cfg) => Some(gauss_hermite(cfg.projection_rule_nodes)?),
        None => None,
    };

    let mut state = TensorState { coeffs: q0.clone(), log_scale: 0.0, basis: basis0.clone(), t: 0.0 };
    let mut prop = Propagator::new(&assemble(&state.basis)?, method, bundle.dt, opts.renormalize)?;
    let mut moments = TensorMoments::new(&state.basis, opts.neg_mass)?;
    let mut last_sigma = state.basis.sigma.clone();
    let mut rebases = 0usize;
    let mut out = Vec::with_capacity(bundle.steps() + 1);
    out.push(moments.estimate(&state, false)?);
    for k in 0..bundle.steps() {
        let step = k + 1;
        let t = bundle.times[step];
        let (coeffs, log) = prop.step(&state.coeffs, &bundle.dz[k], bundle.dn[k]).map_err(|e| e.at_step(step, t))?;
        state.coeffs = coeffs;
        state.log_scale += log;
        state.t = t;
        let mut est = moments.estimate(&state, false).map_err(|e| e.at_step(step, t))?;

        if let (Some(cfg), Some(rule)) = (adapt, proj_rule.as_ref()) {
            let mut targets = Vec::new();
            for a in 0..state.basis.d {
                let var = est.variance[a];
                let valid = var > 0.0 && var.is_finite();
                if valid {
                    last_sigma[a] = var.sqrt();
                }
                if axis_needs_rebase(est.mean[a], var, state.basis.mu[a], state.basis.sigma[a], cfg) {
                    targets.push((a, est.mean[a], last_sigma[a]));
                }
            }
            if !targets.is_empty() {
                rebases += 1;
                if rebases > cfg.max_rebases {
                    return Err(Error::RebaseLimit { max: cfg.max_rebases, step });
                }
                let before = state.coeffs.norm();
                let mut coeffs = state.coeffs.clone();
                let mut new_basis = state.basis.clone();
                for &(a, mu, sigma) in &targets {
                    if !mu.is_finite() {
                        return Err(Error::Divergence { step, t });
                    }
                    new_basis.mu[a] = mu;
                    new_basis.sigma[a] = sigma;
                    let tm = transition_matrix(&state.basis.axis(a), &new_basis.axis(a), rule)?;
                    coeffs = apply_axis(&coeffs, state.basis.n_per_dim, state.basis.d, a, &tm);
                }
                let after = coeffs.norm();
                if !(after * after >= 0.5 * before * before) {
                    return Err(Error::RebaseMassLoss { retained: 100.0 * (after / before).powi(2) });
                }
                state.coeffs = coeffs;
                state.basis = new_basis;
                prop = Propagator::new(&assemble(&state.basis)?, method, bundle.dt, opts.renormalize)?;
                moments = TensorMoments::new(&state.basis, opts.neg_mass)?;
                est = moments.estimate(&state, true).map_err(|e| e.at_step(step, t))?;
            }
        }
        out.push(est);
    }
    Ok((out, state))
}
