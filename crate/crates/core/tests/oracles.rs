//! Closed forms checked against independent numerical oracles.

use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use zakai_core::galerkin::{assemble_quadrature, kalman_matrices};
use zakai_core::hermite::{
    basis_eval, build_coeff_table, hermite_functions, moment_weight, project_gaussian, BasisFamily, BasisSpec,
};
use zakai_core::model::{make_linear_model, simulate_bundle, LinearModelParams};
use zakai_core::numerics::{gauss_hermite, matrix_exp};
use zakai_core::reference::{kalman_bucy, particle_filter, stationary_variance};

mod common;
use common::{oracle_e, trapezoid};

#[test]
fn basis_values_match_recurrence_oracle() {
    for &x in &[-6.0, -2.5, -0.3, 0.0, 1.1, 4.0, 9.0] {
        let lib = hermite_functions(30, x);
        let ora = oracle_e(30, x);
        for i in 0..30 {
            assert_abs_diff_eq!(lib[i], ora[i], epsilon = 1e-12);
        }
    }
    assert_abs_diff_eq!(
        basis_eval(&BasisSpec::hermite(3).unwrap(), 1, 0.0).unwrap(),
        (2.0 * PI).powf(-0.25),
        epsilon = 1e-15
    );
    let shifted = BasisSpec::new(BasisFamily::Hermite, 3, 5.0, 2.0).unwrap();
    assert_abs_diff_eq!(
        basis_eval(&shifted, 1, 5.0).unwrap(),
        (2.0 * PI).powf(-0.25) / 2f64.sqrt(),
        epsilon = 1e-15
    );
}

#[test]
fn orthonormality_n25() {
    let rule = gauss_hermite(120).unwrap();
    let mut gram = DMatrix::<f64>::zeros(25, 25);
    for (x, w) in rule.mapped(0.0, std::f64::consts::SQRT_2) {
        let e = hermite_functions(25, x);
        for i in 0..25 {
            for j in 0..25 {
                gram[(i, j)] += w * e[i] * e[j];
            }
        }
    }
    let off = (gram - DMatrix::identity(25, 25)).amax();
    assert!(off < 1e-8, "Gram deviates by {off:e}");
}

#[test]
fn recurrence_identities() {
    for &x in &[-3.0, -1.0, 0.0, 0.5, 2.0] {
        let e = hermite_functions(22, x);
        let at = |i: usize| if i == 0 { 0.0 } else { e[i - 1] };
        for i in 1..=20usize {
            let fi = i as f64;
            let first = x * at(i) - (fi - 1.0).sqrt() * at(i - 1) - fi.sqrt() * at(i + 1);
            assert!(first.abs() <= 1e-10, "x e_i relation at i={i}, x={x}: {first:e}");
            let two_below = if i >= 3 { ((fi - 1.0) * (fi - 2.0)).sqrt() * at(i - 2) } else { 0.0 };
            let second = x * x * at(i) - two_below - (2.0 * fi - 1.0) * at(i) - (fi * (fi + 1.0)).sqrt() * at(i + 2);
            assert!(second.abs() <= 1e-10, "x² e_i relation at i={i}, x={x}: {second:e}");
        }
    }
}

#[test]
fn derivative_relation_by_finite_differences() {
    let h = 1e-5;
    for &x in &[-2.0, -0.4, 0.0, 1.3, 3.0] {
        let plus = hermite_functions(16, x + h);
        let minus = hermite_functions(16, x - h);
        let e = hermite_functions(16, x);
        let at = |i: usize| if i == 0 { 0.0 } else { e[i - 1] };
        for i in 1..=15usize {
            let fd = (plus[i - 1] - minus[i - 1]) / (2.0 * h);
            let formula = 0.5 * ((i as f64 - 1.0).sqrt() * at(i - 1) - (i as f64).sqrt() * at(i + 1));
            assert!((fd - formula).abs() < 1e-6, "i={i}, x={x}");
        }
    }
}

#[test]
fn moment_weights_match_quadrature() {
    let t = build_coeff_table(40).unwrap();
    for j in 0..=4 {
        for i in 1..=15 {
            let q = trapezoid(|x| x.powi(j as i32) * oracle_e(i, x)[i - 1], 60.0, 24_000);
            let w = moment_weight(&t, j, i).unwrap();
            assert!((q - w).abs() <= 1e-10 * (1.0 + q.abs()), "j={j}, i={i}: {w} vs {q}");
        }
    }
}

#[test]
fn corrected_moment_factor_pin() {
    let t = build_coeff_table(10).unwrap();
    let corrected = moment_weight(&t, 1, 2).unwrap();
    let exact = 2.0 * 2f64.sqrt() * (2.0 * PI).powf(0.25);
    assert_abs_diff_eq!(corrected, exact, epsilon = 1e-12);
    assert_abs_diff_eq!(corrected, 4.47806, epsilon = 1e-5);
    // without the 2^{j/2} factor the formula gives a value the integral rules out
    assert_abs_diff_eq!(corrected / 2f64.sqrt(), 3.16647, epsilon = 1e-5);
    assert_abs_diff_eq!(moment_weight(&t, 0, 1).unwrap(), 2f64.sqrt() * (2.0 * PI).powf(0.25), epsilon = 1e-12);
}

#[test]
fn gaussian_projection_matches_quadrature() {
    let t = build_coeff_table(40).unwrap();
    for &(mu0, var0) in &[(0.0, 1.0), (0.0, 2.0), (1.5, 0.3), (-2.0, 4.0), (0.7, 0.05)] {
        let c = project_gaussian(&t, mu0, var0, 20).unwrap();
        for i in 1..=20 {
            let q = trapezoid(
                |x| (-(x - mu0) * (x - mu0) / (2.0 * var0)).exp() / (2.0 * PI * var0).sqrt() * oracle_e(i, x)[i - 1],
                40.0,
                40_000,
            );
            assert!((c[i - 1] - q).abs() <= 1e-10, "({mu0}, {var0}) entry {i}: {} vs {q}", c[i - 1]);
        }
    }
    let unit = project_gaussian(&t, 0.0, 1.0, 2).unwrap();
    assert_abs_diff_eq!(unit[0], (2.0 * PI).powf(-0.75) * (4.0 * PI / 3.0).sqrt(), epsilon = 1e-14);
    assert_abs_diff_eq!(unit[1], 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(project_gaussian(&t, 0.0, 2.0, 1).unwrap()[0], (2.0 * PI).powf(-0.25) / 2f64.sqrt(), epsilon = 1e-14);
}

#[test]
fn projection_converges_in_l2() {
    let t = build_coeff_table(40).unwrap();
    let q0 = |x: f64| (-x * x / 2.0).exp() / (2.0 * PI).sqrt();
    let full = project_gaussian(&t, 0.0, 1.0, 39).unwrap();
    let mut last = f64::INFINITY;
    for n in 1..=24 {
        let c = project_gaussian(&t, 0.0, 1.0, n).unwrap();
        let err = trapezoid(
            |x| {
                let r = q0(x) - oracle_e(n, x).iter().zip(&c).map(|(e, ci)| e * ci).sum::<f64>();
                r * r
            },
            40.0,
            16_000,
        )
        .sqrt();
        // odd coefficients of a centered density vanish, so the error can stall
        assert!(err <= last * (1.0 + 1e-9), "L² error increased at n={n}");
        // Parseval: the error is the norm of the discarded coefficients
        let tail = full[n..].iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-9 + 1e-3 * tail, "n={n}: {err:e} vs tail {tail:e}");
        if n == 20 {
            assert_abs_diff_eq!(err, 3.8775e-6, epsilon = 1e-9);
        }
        last = err;
    }
    assert!(last < 1e-6, "L² error at n = 24 is {last:e}");
}

#[test]
fn gauss_hermite_small_rules_and_exactness() {
    let r1 = gauss_hermite(1).unwrap();
    assert_abs_diff_eq!(r1.nodes[0], 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(r1.weights[0], 1.0, epsilon = 1e-15);
    let r3 = gauss_hermite(3).unwrap();
    assert_abs_diff_eq!(r3.nodes[2], 3f64.sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(r3.weights[1], 2.0 / 3.0, epsilon = 1e-12);
    for m in 1..=10usize {
        let r = gauss_hermite(m).unwrap();
        assert_abs_diff_eq!(r.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for deg in 0..2 * m {
            let q: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(deg as i32)).sum();
            // E[Y^deg] = (deg − 1)!! for even degrees
            let exact = if deg % 2 == 1 { 0.0 } else { (1..deg).step_by(2).map(|k| k as f64).product() };
            // odd moments cancel large terms, so scale by the neighbouring even moment
            let size: f64 = (1..=deg).step_by(2).map(|k| k as f64).product();
            assert!((q - exact).abs() <= 1e-10 * size.max(1.0), "m={m}, degree {deg}");
        }
    }
}

#[test]
fn matrix_exponential_matches_series_and_scalars() {
    let m = DMatrix::from_row_slice(3, 3, &[0.2, -1.0, 0.3, 0.5, -0.4, 0.0, 0.1, 0.2, -0.7]);
    // Taylor series with many terms is an adequate oracle for a small norm
    let mut term = DMatrix::<f64>::identity(3, 3);
    let mut sum = term.clone();
    for k in 1..60 {
        term = &term * &m / k as f64;
        sum += &term;
    }
    assert!((matrix_exp(&m).unwrap() - sum).amax() < 1e-13);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[-30.0, 2.0]));
    let e = matrix_exp(&d).unwrap();
    assert_abs_diff_eq!(e[(0, 0)] / (-30f64).exp(), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(e[(1, 1)], 2f64.exp(), epsilon = 1e-12);
}

#[test]
fn closed_form_matrices_match_quadrature_grid() {
    let rule = gauss_hermite(120).unwrap();
    for &b in &[-0.5, 0.5] {
        for &sigma in &[1.0, 2.0] {
            for &h in &[0.1, 5.5] {
                for &lambda in &[0.0, 10.0] {
                    let p = LinearModelParams { b, sigma, h, lambda, mu0: 0.0, var0: 1.0 };
                    let spec = make_linear_model(&p).unwrap();
                    let closed = kalman_matrices(20, &p).unwrap();
                    let quad = assemble_quadrature(&spec, &BasisSpec::hermite(20).unwrap(), &rule).unwrap();
                    let scale = 1.0 + closed.a.amax().max(closed.c.amax());
                    assert!((&closed.a - &quad.a).amax() <= 1e-8 * scale, "A at {p:?}");
                    assert!((&closed.b[0] - &quad.b[0]).amax() <= 1e-8 * scale, "B at {p:?}");
                    assert!((&closed.c - &quad.c).amax() <= 1e-8 * scale, "C at {p:?}");
                    assert!((&quad.d - DMatrix::identity(20, 20)).amax() <= 1e-8, "D at {p:?}");
                }
            }
        }
    }
}

#[test]
fn kalman_bucy_no_information_and_bound() {
    let p = LinearModelParams { h: 0.0, ..LinearModelParams::paper_defaults(0.0, 0.0) };
    let spec = make_linear_model(&LinearModelParams { h: 5.5, ..p }).unwrap();
    let bundle = simulate_bundle(&spec, 1e-3, 1000, 4).unwrap();
    let (m, v) = kalman_bucy(&p, &bundle).unwrap();
    // explicit Euler on dm = b m dt
    assert_abs_diff_eq!(m[1000], p.mu0 * (1.0 + p.b * 1e-3f64).powi(1000), epsilon = 1e-9);
    let (_, vh) = kalman_bucy(&LinearModelParams { h: 5.5, ..p }, &bundle).unwrap();
    for (a, b) in vh.iter().zip(&v) {
        assert!(*a > 0.0 && a <= b);
    }
    let informative = LinearModelParams::paper_defaults(5.5, 0.0);
    assert_abs_diff_eq!(stationary_variance(&informative), 0.38055, epsilon = 1e-5);
}

#[test]
fn particle_filter_agrees_with_kalman_bucy() {
    let p = LinearModelParams::paper_defaults(5.5, 0.0);
    let spec = make_linear_model(&p).unwrap();
    let bundle = simulate_bundle(&spec, 1e-3, 300, 21).unwrap();
    let (m, v) = kalman_bucy(&p, &bundle).unwrap();
    let pf = particle_filter(&spec, &bundle, 5000, 3).unwrap();
    for k in [100, 200, 300] {
        let se = (v[k] / 5000.0).sqrt();
        // resampling inflates the Monte Carlo error; allow the usual factor
        assert!((pf[k].mean1() - m[k]).abs() < 3.0 * 3.0 * se, "step {k}");
    }
}
