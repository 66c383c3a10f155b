//! Hermite polynomials and the Hermite function basis of `L²(ℝ)`.
//!
//! `f_i` is the probabilists' Hermite polynomial (`f_0 = 1`, `f_1 = x`,
//! `f_{i+1} = x f_i − i f_{i−1}`) and the basis functions are
//! `e_i(x) = √(φ(x)/(i−1)!) f_{i−1}(x)` for `i ≥ 1`, orthonormal in `L²`.
//! An adapted basis relocates them: `e_i^{μ,σ}(x) = σ^{−1/2} e_i((x−μ)/σ)`.
//!
//! Indices of basis functions are 1-based in the public API, matching the
//! usual notation; internal vectors are 0-based.

use nalgebra::DMatrix;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Largest polynomial degree held by [`HermiteCoeffTable`].
pub const MAX_DEGREE: usize = 40;

/// Exact integer coefficient tables linking monomials and Hermite polynomials.
///
/// `theta[i][k]` is the coefficient of `x^k` in `f_i`; `iota[i][k]` is the
/// coefficient of `f_k` in `x^i`. Both are built in `i128` and converted to
/// floating point only at the point of use.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteCoeffTable {
    max_degree: usize,
    theta: Vec<Vec<i128>>,
    iota: Vec<Vec<i128>>,
}

impl HermiteCoeffTable {
    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Row `i` of ϑ: coefficients of `f_i` in the monomial basis.
    pub fn theta(&self, i: usize) -> &[i128] {
        &self.theta[i]
    }

    /// Row `i` of ι: coefficients of `x^i` in the Hermite basis.
    pub fn iota(&self, i: usize) -> &[i128] {
        &self.iota[i]
    }
}

/// Builds the ϑ and ι tables up to `max_degree` (at most [`MAX_DEGREE`]).
pub fn build_coeff_table(max_degree: usize) -> Result<HermiteCoeffTable> {
    if max_degree > MAX_DEGREE {
        return Err(Error::DegreeOverflow { degree: max_degree, max: MAX_DEGREE });
    }
    let overflow = || Error::DegreeOverflow { degree: max_degree, max: MAX_DEGREE };

    // f_{i+1} = x f_i − i f_{i−1}
    let mut theta: Vec<Vec<i128>> = vec![vec![1]];
    if max_degree >= 1 {
        theta.push(vec![0, 1]);
    }
    for i in 1..max_degree {
        let mut row = vec![0i128; i + 2];
        for (k, &c) in theta[i].iter().enumerate() {
            row[k + 1] = row[k + 1].checked_add(c).ok_or_else(overflow)?;
        }
        for (k, &c) in theta[i - 1].iter().enumerate() {
            let t = c.checked_mul(i as i128).ok_or_else(overflow)?;
            row[k] = row[k].checked_sub(t).ok_or_else(overflow)?;
        }
        theta.push(row);
    }

    // x^{i+1} = Σ_k ι^i_k x f_k = Σ_k ι^i_k (f_{k+1} + k f_{k−1})
    let mut iota: Vec<Vec<i128>> = vec![vec![1]];
    for i in 0..max_degree {
        let mut row = vec![0i128; i + 2];
        for (k, &c) in iota[i].iter().enumerate() {
            row[k + 1] = row[k + 1].checked_add(c).ok_or_else(overflow)?;
            if k >= 1 {
                let t = c.checked_mul(k as i128).ok_or_else(overflow)?;
                row[k - 1] = row[k - 1].checked_add(t).ok_or_else(overflow)?;
            }
        }
        iota.push(row);
    }

    Ok(HermiteCoeffTable { max_degree, theta, iota })
}

/// Basis family of a one-dimensional Galerkin basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisFamily {
    /// Orthonormal Hermite functions.
    Hermite,
    /// L²-normalized Gaussian bumps on an equispaced grid of centers.
    Gaussian,
}

/// A one-dimensional basis of size `n` located at `mu` with scale `sigma`.
///
/// For the Gaussian family the centers are equispaced on
/// `[mu − 4 sigma, mu + 4 sigma]` with a common width equal to the spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
}

impl BasisSpec {
    pub fn new(family: BasisFamily, n: usize, mu: f64, sigma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("basis size must be at least 1".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "basis location/scale must be finite with sigma > 0 (mu = {mu}, sigma = {sigma})"
            )));
        }
        Ok(BasisSpec { family, n, mu, sigma })
    }

    /// Unadapted Hermite basis (`μ = 0`, `σ = 1`).
    pub fn hermite(n: usize) -> Result<Self> {
        Self::new(BasisFamily::Hermite, n, 0.0, 1.0)
    }

    pub fn with_location(&self, mu: f64, sigma: f64) -> Result<Self> {
        Self::new(self.family, self.n, mu, sigma)
    }

    pub fn is_orthonormal(&self) -> bool {
        self.family == BasisFamily::Hermite
    }

    /// Center and width of the Gaussian bumps.
    pub fn gaussian_layout(&self) -> (Vec<f64>, f64) {
        if self.n == 1 {
            return (vec![self.mu], self.sigma);
        }
        let spacing = 8.0 * self.sigma / (self.n - 1) as f64;
        let centers =
            (0..self.n).map(|i| self.mu - 4.0 * self.sigma + spacing * i as f64).collect();
        (centers, spacing)
    }

    /// Center and scale of a Gauss–Hermite frame in which `e_i · e_j` is a
    /// polynomial times the frame's Gaussian weight (0-based indices).
    pub fn pair_frame(&self, i: usize, j: usize) -> (f64, f64) {
        match self.family {
            BasisFamily::Hermite => (self.mu, self.sigma),
            BasisFamily::Gaussian => {
                let (c, w) = self.gaussian_layout();
                (0.5 * (c[i] + c[j]), w / std::f64::consts::SQRT_2)
            }
        }
    }

    /// Values and first two derivatives of every basis function at `x`.
    pub fn eval_with_derivatives(&self, x: f64) -> BasisValues {
        match self.family {
            BasisFamily::Hermite => {
                let y = (x - self.mu) / self.sigma;
                let mut v = hermite_with_derivatives(self.n, y);
                let s = self.sigma.sqrt();
                for k in 0..self.n {
                    v.value[k] /= s;
                    v.d1[k] /= s * self.sigma;
                    v.d2[k] /= s * self.sigma * self.sigma;
                }
                v
            }
            BasisFamily::Gaussian => {
                let (centers, w) = self.gaussian_layout();
                let norm = (PI * w * w).powf(-0.25);
                let w2 = w * w;
                let mut v = BasisValues::zeros(self.n);
                for (k, c) in centers.iter().enumerate() {
                    let u = x - c;
                    let g = norm * (-0.5 * u * u / w2).exp();
                    v.value[k] = g;
                    v.d1[k] = -u / w2 * g;
                    v.d2[k] = (u * u / (w2 * w2) - 1.0 / w2) * g;
                }
                v
            }
        }
    }

    /// Values of every basis function at `x`.
    pub fn eval_all(&self, x: f64) -> Vec<f64> {
        match self.family {
            BasisFamily::Hermite => {
                let y = (x - self.mu) / self.sigma;
                let s = self.sigma.sqrt();
                let mut v = hermite_functions(self.n, y);
                v.iter_mut().for_each(|e| *e /= s);
                v
            }
            BasisFamily::Gaussian => self.eval_with_derivatives(x).value,
        }
    }
}

/// Basis function values with first and second derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisValues {
    pub value: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl BasisValues {
    fn zeros(n: usize) -> Self {
        BasisValues { value: vec![0.0; n], d1: vec![0.0; n], d2: vec![0.0; n] }
    }
}

/// `e_1(y) … e_n(y)` of the unadapted basis, via the normalized three-term
/// recurrence `e_{k+1} = (y e_k − √(k−1) e_{k−1}) / √k`.
pub fn hermite_functions(n: usize, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    if n == 0 {
        return out;
    }
    out[0] = (2.0 * PI).powf(-0.25) * (-0.25 * y * y).exp();
    if n > 1 {
        out[1] = y * out[0];
    }
    for k in 2..n {
        // out[k] is e_{k+1}
        let kf = k as f64;
        out[k] = (y * out[k - 1] - (kf - 1.0).sqrt() * out[k - 2]) / kf.sqrt();
    }
    out
}

/// Hermite functions with derivatives from the closed-form relations
/// `e_j' = ½(√(j−1) e_{j−1} − √j e_{j+1})` and
/// `e_j'' = ¼(√((j−1)(j−2)) e_{j−2} − (2j−1) e_j + √(j(j+1)) e_{j+2})`.
pub fn hermite_with_derivatives(n: usize, y: f64) -> BasisValues {
    let ext = hermite_functions(n + 2, y);
    // e(j) with 1-based j, e_0 ≡ 0
    let e = |j: usize| if j == 0 { 0.0 } else { ext[j - 1] };
    let mut v = BasisValues::zeros(n);
    for j in 1..=n {
        let jf = j as f64;
        v.value[j - 1] = e(j);
        v.d1[j - 1] = 0.5 * ((jf - 1.0).sqrt() * e(j - 1) - jf.sqrt() * e(j + 1));
        let back = if j >= 3 { ((jf - 1.0) * (jf - 2.0)).sqrt() * e(j - 2) } else { 0.0 };
        v.d2[j - 1] =
            0.25 * (back - (2.0 * jf - 1.0) * e(j) + (jf * (jf + 1.0)).sqrt() * e(j + 2));
    }
    v
}

/// `e_i^{μ,σ}(x)` for `1 ≤ i ≤ spec.n`.
pub fn basis_eval(spec: &BasisSpec, i: usize, x: f64) -> Result<f64> {
    if i == 0 || i > spec.n {
        return Err(Error::IndexOutOfRange { index: i, n: spec.n });
    }
    Ok(match spec.family {
        BasisFamily::Hermite => {
            let y = (x - spec.mu) / spec.sigma;
            hermite_functions(i, y)[i - 1] / spec.sigma.sqrt()
        }
        BasisFamily::Gaussian => spec.eval_all(x)[i - 1],
    })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `(x^j, e_i)` for the unadapted Hermite basis:
///
/// `√2 · 2^{j/2} · (2π)^{1/4} / √((i−1)!) · Σ_k ϑ^{i−1}_k 2^{k/2} ι^{k+j}_0`.
///
/// The factor `2^{j/2}` comes from the substitution `x = √2 y`, which turns
/// `x^j` into `2^{j/2} y^j`. The sum only involves `k ≡ j (mod 2)`, so it is
/// an exact integer times `2^{(j mod 2)/2}`.
pub fn moment_weight(table: &HermiteCoeffTable, j: usize, i: usize) -> Result<f64> {
    if i == 0 {
        return Err(Error::IndexOutOfRange { index: i, n: table.max_degree + 1 });
    }
    let degree = i - 1 + j;
    if degree > table.max_degree {
        return Err(Error::DegreeOverflow { degree, max: table.max_degree });
    }
    let overflow = || Error::DegreeOverflow { degree, max: table.max_degree };
    let parity = j % 2;
    let mut sum: i128 = 0;
    for (k, &th) in table.theta(i - 1).iter().enumerate() {
        if th == 0 || (k + j) % 2 == 1 {
            continue;
        }
        // here k ≡ j (mod 2), so (k − parity) is even
        let pow2: i128 = 1i128
            .checked_shl(((k - parity) / 2) as u32)
            .ok_or_else(overflow)?;
        let term = th
            .checked_mul(pow2)
            .and_then(|t| t.checked_mul(table.iota(k + j)[0]))
            .ok_or_else(overflow)?;
        sum = sum.checked_add(term).ok_or_else(overflow)?;
    }
    let half_pow = if parity == 1 { std::f64::consts::SQRT_2 } else { 1.0 };
    let prefactor = std::f64::consts::SQRT_2
        * 2f64.powf(j as f64 / 2.0)
        * (2.0 * PI).powf(0.25)
        / factorial(i - 1).sqrt();
    Ok(prefactor * half_pow * sum as f64)
}

/// Moment weights `(x^j, e_i)` of the unadapted basis for `j = 0..=max_j`,
/// `i = 1..=n`, precomputed once and relocated to adapted bases on demand.
#[derive(Debug, Clone)]
pub struct MomentTable {
    weights: Vec<Vec<f64>>,
}

impl MomentTable {
    pub fn new(table: &HermiteCoeffTable, max_j: usize, n: usize) -> Result<Self> {
        let weights = (0..=max_j)
            .map(|j| (1..=n).map(|i| moment_weight(table, j, i)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(MomentTable { weights })
    }

    pub fn n(&self) -> usize {
        self.weights[0].len()
    }

    pub fn max_j(&self) -> usize {
        self.weights.len() - 1
    }

    /// `(x^j, e_i)` for the unadapted basis (0-based `i`).
    pub fn unadapted(&self, j: usize) -> &[f64] {
        &self.weights[j]
    }

    /// `(x^j, e_i^{μ,σ}) = σ^{1/2} Σ_r C(j,r) μ^{j−r} σ^r (y^r, e_i)`, first `n` entries.
    pub fn adapted(&self, j: usize, n: usize, mu: f64, sigma: f64) -> Vec<f64> {
        let root = sigma.sqrt();
        let mut out = vec![0.0; n];
        let mut binom = 1.0;
        for r in 0..=j {
            let coef = binom * mu.powi((j - r) as i32) * sigma.powi(r as i32) * root;
            for (o, w) in out.iter_mut().zip(&self.weights[r][..n]) {
                *o += coef * w;
            }
            binom = binom * (j - r) as f64 / (r + 1) as f64;
        }
        out
    }
}

/// Coefficients `(q_0, e_i)`, `i = 1..=n`, of the `N(mu0, var0)` density in
/// the unadapted Hermite basis.
///
/// Completing the square, `N(x; μ₀, v₀) e^{−x²/4} = K · N(x; a, s²)` with
/// `a = 2μ₀/(2+v₀)`, `s² = 2v₀/(2+v₀)` and
/// `K = √(2/(2+v₀)) · exp(−μ₀²/(2(2+v₀)))`. Hence
/// `(q_0, e_i) = (2π)^{−1/4} K / √((i−1)!) · E[f_{i−1}(a + sY)]`, and the
/// expectation expands as `Σ_k ϑ^{i−1}_k Σ_m C(k,m) a^{k−m} s^m ι^m_0` with
/// `ι^m_0 = E[Y^m]`.
pub fn project_gaussian(
    table: &HermiteCoeffTable,
    mu0: f64,
    var0: f64,
    n: usize,
) -> Result<Vec<f64>> {
    if !(var0 > 0.0) || !var0.is_finite() || !mu0.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Gaussian projection needs finite mu0 and var0 > 0 (got {mu0}, {var0})"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if n - 1 > table.max_degree {
        return Err(Error::DegreeOverflow { degree: n - 1, max: table.max_degree });
    }
    let a = 2.0 * mu0 / (2.0 + var0);
    let s = (2.0 * var0 / (2.0 + var0)).sqrt();
    let k_const = (2.0 / (2.0 + var0)).sqrt() * (-mu0 * mu0 / (2.0 * (2.0 + var0))).exp();
    let prefactor = (2.0 * PI).powf(-0.25) * k_const;

    // raw moments of a + sY: E[(a+sY)^k] = Σ_m C(k,m) a^{k−m} s^m ι^m_0
    let max_k = n - 1;
    let shifted: Vec<f64> = (0..=max_k)
        .map(|k| {
            let mut acc = 0.0;
            let mut binom = 1.0;
            for m in 0..=k {
                if m % 2 == 0 {
                    let io = table.iota(m)[0] as f64;
                    acc += binom * a.powi((k - m) as i32) * s.powi(m as i32) * io;
                }
                binom = binom * (k - m) as f64 / (m + 1) as f64;
            }
            acc
        })
        .collect();

    Ok((1..=n)
        .map(|i| {
            let expectation: f64 = table
                .theta(i - 1)
                .iter()
                .zip(&shifted)
                .map(|(&th, &mk)| th as f64 * mk)
                .sum();
            prefactor * expectation / factorial(i - 1).sqrt()
        })
        .collect())
}

/// Coefficients of the `N(mu0, var0)` density in an adapted Hermite basis.
pub fn project_gaussian_adapted(
    table: &HermiteCoeffTable,
    basis: &BasisSpec,
    mu0: f64,
    var0: f64,
) -> Result<Vec<f64>> {
    // q0(μ + σy) σ = N(y; (μ0−μ)/σ, var0/σ²); (q0, e^{μ,σ}_i) = σ^{-1/2} (q̃0, e_i)
    let y_mu = (mu0 - basis.mu) / basis.sigma;
    let y_var = var0 / (basis.sigma * basis.sigma);
    let mut c = project_gaussian(table, y_mu, y_var, basis.n)?;
    let s = basis.sigma.sqrt();
    c.iter_mut().for_each(|v| *v /= s);
    Ok(c)
}

/// Matrices of elementary operators on the first `n` unadapted Hermite
/// functions, with the convention `M[j][i] = (e_i, 𝒪 e_j)` (coefficient of
/// `e_i` in `𝒪 e_j`), 0-based.
#[derive(Debug, Clone)]
pub struct AxisOperators {
    /// multiplication by `y`
    pub y: DMatrix<f64>,
    /// multiplication by `y²`
    pub y2: DMatrix<f64>,
    /// `d/dy`
    pub dy: DMatrix<f64>,
    /// `d²/dy²`
    pub d2: DMatrix<f64>,
    /// `y · d/dy`
    pub ydy: DMatrix<f64>,
}

impl AxisOperators {
    pub fn new(n: usize) -> Self {
        let mut y = DMatrix::zeros(n, n);
        let mut y2 = DMatrix::zeros(n, n);
        let mut dy = DMatrix::zeros(n, n);
        let mut d2 = DMatrix::zeros(n, n);
        let mut ydy = DMatrix::zeros(n, n);
        // 1-based j; entries (j, i) stored at [j-1, i-1]
        let put = |m: &mut DMatrix<f64>, j: usize, i: usize, v: f64| {
            if i >= 1 && i <= n {
                m[(j - 1, i - 1)] += v;
            }
        };
        for j in 1..=n {
            let jf = j as f64;
            let down1 = (jf - 1.0).sqrt();
            let up1 = jf.sqrt();
            let down2 = ((jf - 1.0) * (jf - 2.0)).max(0.0).sqrt();
            let up2 = (jf * (jf + 1.0)).sqrt();
            // y e_j = √(j−1) e_{j−1} + √j e_{j+1}
            if j >= 2 {
                put(&mut y, j, j - 1, down1);
                put(&mut dy, j, j - 1, 0.5 * down1);
            }
            put(&mut y, j, j + 1, up1);
            put(&mut dy, j, j + 1, -0.5 * up1);
            // y² e_j = √((j−1)(j−2)) e_{j−2} + (2j−1) e_j + √(j(j+1)) e_{j+2}
            if j >= 3 {
                put(&mut y2, j, j - 2, down2);
                put(&mut d2, j, j - 2, 0.25 * down2);
                put(&mut ydy, j, j - 2, 0.5 * down2);
            }
            put(&mut y2, j, j, 2.0 * jf - 1.0);
            put(&mut y2, j, j + 2, up2);
            put(&mut d2, j, j, -0.25 * (2.0 * jf - 1.0));
            put(&mut d2, j, j + 2, 0.25 * up2);
            put(&mut ydy, j, j, -0.5);
            put(&mut ydy, j, j + 2, -0.5 * up2);
        }
        AxisOperators { y, y2, dy, d2, ydy }
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }
}
