//! Quadrature, matrix exponential and Gram-matrix solves.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::hermite::hermite_functions;

/// Largest supported Gauss–Hermite rule.
pub const MAX_NODES: usize = 512;

/// Normalization of a Gauss–Hermite rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// `∫ f(x) φ(x) dx ≈ Σ w_k f(x_k)` with `φ` the standard normal density.
    Probabilists,
}

/// A Gauss–Hermite rule for the standard normal weight.
///
/// Besides the weights `w_k` the rule stores `w_k / φ(x_k)`, computed without
/// forming `φ(x_k)`, so that unweighted integrals `∫ g(x) dx ≈ Σ (w_k/φ(x_k)) g(x_k)`
/// stay accurate for large rules whose outer weights underflow.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub normalization: Normalization,
    unweighted: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Weights for integrating against Lebesgue measure, `w_k / φ(x_k)`.
    pub fn unweighted(&self) -> &[f64] {
        &self.unweighted
    }

    /// Nodes and Lebesgue weights mapped to `x = center + scale · y`.
    pub fn mapped(&self, center: f64, scale: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes
            .iter()
            .zip(&self.unweighted)
            .map(move |(&y, &w)| (center + scale * y, scale * w))
    }
}

/// Default number of nodes for a basis of size `n`.
pub fn default_nodes(n: usize) -> usize {
    (2 * n + 40).max(120).min(MAX_NODES)
}

/// Probabilists' Gauss–Hermite rule with `m` nodes.
///
/// Nodes are the eigenvalues of the symmetric Jacobi matrix (off-diagonal
/// `√k`), polished by Newton steps on the Hermite function `h_m`. Weights use
/// the Christoffel form `w_k = φ(x_k) / (m · h_{m−1}(x_k)²)` with `h` the
/// orthonormal Hermite functions, which avoids underflow in the tails.
pub fn gauss_hermite(m: usize) -> Result<QuadratureRule> {
    if m == 0 || m > MAX_NODES {
        return Err(Error::InvalidArgument(format!(
            "Gauss–Hermite rule size must be in 1..={MAX_NODES}, got {m}"
        )));
    }
    let mut jacobi = DMatrix::<f64>::zeros(m, m);
    for k in 1..m {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    let mf = m as f64;
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let h = hermite_functions(m + 1, *x);
            let (hm, hm1) = (h[m], h[m - 1]);
            let deriv = mf.sqrt() * hm1 - 0.5 * *x * hm;
            if deriv == 0.0 {
                break;
            }
            let step = hm / deriv;
            *x -= step;
            if step.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
    }
    // exact symmetry about zero
    for k in 0..m / 2 {
        let v = 0.5 * (nodes[m - 1 - k] - nodes[k]);
        nodes[k] = -v;
        nodes[m - 1 - k] = v;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }

    let mut weights = Vec::with_capacity(m);
    let mut unweighted = Vec::with_capacity(m);
    for &x in &nodes {
        let h = hermite_functions(m, x)[m - 1];
        let lebesgue = 1.0 / (mf * h * h);
        unweighted.push(lebesgue);
        weights.push(lebesgue * (-0.5 * x * x).exp() / (2.0 * PI).sqrt());
    }
    Ok(QuadratureRule { nodes, weights, normalization: Normalization::Probabilists, unweighted })
}

/// `∫ f(x) g(x) dx` by the rule mapped to `x = center + scale · y`:
///
/// `scale · Σ_k (w_k / φ(y_k)) f(x_k) g(x_k)`.
///
/// Exact (up to rule degree) whenever `f·g` equals `φ((x − center)/scale)`
/// times a polynomial.
pub fn inner_product<F, G>(f: F, g: G, rule: &QuadratureRule, center: f64, scale: f64) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    rule.mapped(center, scale).map(|(x, w)| w * f(x) * g(x)).sum()
}

/// Padé(13) numerator coefficients.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// 1-norm threshold below which Padé(13) is accurate to unit roundoff.
const THETA13: f64 = 5.371920351148152;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a degree-13 Padé approximant.
pub fn matrix_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::ShapeMismatch(format!("matrix_exp needs a square matrix, got {}x{}", n, m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix_exp input"));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let norm = norm1(m);
    let squarings = if norm > THETA13 { (norm / THETA13).log2().ceil() as i32 } else { 0 };
    let a = m / 2f64.powi(squarings);

    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let b = &PADE13;

    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u_poly = &a6 * &inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
    let u = &a * u_poly;
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * &inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];

    let numer = &v + &u;
    let denom = &v - &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or(Error::NonFinite("singular Padé denominator"))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix_exp overflow"));
    }
    Ok(r)
}

/// Cholesky factor `D = L Lᵀ` of a Gram matrix, reused across many solves.
#[derive(Debug, Clone)]
pub struct GramFactor {
    lower: DMatrix<f64>,
    condition: f64,
}

impl GramFactor {
    /// Factors `D`; fails with the offending pivot when `D` is not numerically
    /// positive definite.
    pub fn new(d: &DMatrix<f64>) -> Result<Self> {
        let n = d.nrows();
        if n != d.ncols() {
            return Err(Error::ShapeMismatch(format!("Gram matrix is {}x{}", n, d.ncols())));
        }
        let scale = (0..n).map(|i| d[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut l = DMatrix::<f64>::zeros(n, n);
        let mut smallest = (usize::MAX, f64::INFINITY);
        for j in 0..n {
            let mut diag = d[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if diag < smallest.1 {
                smallest = (j, diag);
            }
            if !(diag > 1e-14 * scale) {
                return Err(Error::GramFactorization { column: j, pivot: diag });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = d[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        let eig = SymmetricEigen::new(d.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        log::debug!("Gram factor: n = {n}, smallest pivot {:.3e} at {}", smallest.1, smallest.0);
        Ok(GramFactor { lower: l, condition })
    }

    /// 2-norm condition number of `D`.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.lower.nrows();
        let mut y = v.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.lower[(i, k)] * y[k];
            }
            y[i] = s / self.lower[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[(k, i)] * y[k];
            }
            y[i] = s / self.lower[(i, i)];
        }
        y
    }

    pub fn solve(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = v.clone();
        for (j, col) in v.column_iter().enumerate() {
            out.set_column(j, &self.solve_vec(&col.into_owned()));
        }
        out
    }
}

/// Solution of `D X = V` together with the condition number of `D`.
#[derive(Debug, Clone)]
pub struct GramSolution {
    pub x: DMatrix<f64>,
    pub condition: f64,
}

/// `D⁻¹ V` for a symmetric positive definite Gram matrix `D`, via Cholesky.
pub fn solve_gram(d: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<GramSolution> {
    if d.nrows() != v.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "Gram matrix has {} rows but right-hand side has {}",
            d.nrows(),
            v.nrows()
        )));
    }
    let f = GramFactor::new(d)?;
    Ok(GramSolution { x: f.solve(v), condition: f.condition() })
}
