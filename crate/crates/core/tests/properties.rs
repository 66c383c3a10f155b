//! Structural invariants of the filters, checked over random inputs.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use zakai_core::adaptive::{rebase, run_aga_with, AgaConfig};
use zakai_core::galerkin::{
    coeff_table, conditional_moments, density_eval, gaussian_coefficients, run_filter, run_filter_with,
    write_estimates_csv, FilterOptions,
};
use zakai_core::model::{
    make_decoupled_linear_model, make_linear_model, simulate_bundle, AffineStructure, IntensityBounds,
    QuadraticIntensity,
};
use zakai_core::multidim::{
    affine_tensor_matrices, initial_coefficients_md, run_filter_md, tensor_index, tensor_multi_index,
    TensorBasisSpec,
};
use zakai_core::numerics::gauss_hermite;
use zakai_core::reference::{kalman_bucy, particle_filter, ParticleCloud};
use zakai_core::{BasisFamily, BasisSpec, FilterState, LinearModelParams, Method, ModelSpec, PathBundle};

fn small_config() -> ProptestConfig {
    ProptestConfig { cases: 16, ..ProptestConfig::default() }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(small_config())]

    #[test]
    fn estimates_ignore_positive_scaling(
        mu in -3.0..3.0f64, sd in 0.3..2.0f64, scale in 1e-6..1e6f64, x in -4.0..4.0f64,
    ) {
        let basis = BasisSpec::new(BasisFamily::Hermite, 16, mu, sd).unwrap();
        let c = gaussian_coefficients(&basis, mu + 0.2 * sd, 0.8 * sd * sd).unwrap();
        let state = FilterState { coeffs: c.clone(), log_scale: 0.0, basis: basis.clone(), t: 0.0 };
        let scaled = FilterState { coeffs: c * scale, log_scale: 0.0, basis, t: 0.0 };
        let (a, b) = (conditional_moments(&state, coeff_table()).unwrap(), conditional_moments(&scaled, coeff_table()).unwrap());
        prop_assert!(close(a.mean1(), b.mean1(), 1e-12));
        prop_assert!(close(a.var1(), b.var1(), 1e-12));
        prop_assert!(close(density_eval(&state, x).unwrap(), density_eval(&scaled, x).unwrap(), 1e-12));
    }

    #[test]
    fn renormalization_does_not_change_estimates(seed in 0u64..1000, su in any::<bool>()) {
        let p = LinearModelParams::paper_defaults(1.0, 0.0);
        let spec = make_linear_model(&p).unwrap();
        let bundle = simulate_bundle(&spec, 1e-3, 200, seed).unwrap();
        let basis = BasisSpec::new(BasisFamily::Hermite, 12, 5.0, 0.5).unwrap();
        let q0 = gaussian_coefficients(&basis, 5.0, 0.04).unwrap();
        let method = if su { Method::Su } else { Method::Em };
        let on = run_filter_with(&spec, &basis, method, &bundle, &q0, &FilterOptions::default()).unwrap();
        let off_opts = FilterOptions { renormalize: false, ..FilterOptions::default() };
        let off = run_filter_with(&spec, &basis, method, &bundle, &q0, &off_opts).unwrap();
        for (a, b) in on.iter().zip(&off) {
            prop_assert!(close(a.mean1(), b.mean1(), 1e-9));
            prop_assert!(close(a.var1(), b.var1(), 1e-9));
        }
    }

    #[test]
    fn adaptive_filter_without_rebases_is_the_fixed_filter(seed in 0u64..1000, su in any::<bool>()) {
        let p = LinearModelParams::paper_defaults(1.0, 1.0);
        let spec = make_linear_model(&p).unwrap();
        let bundle = simulate_bundle(&spec, 1e-3, 100, seed).unwrap();
        let basis = BasisSpec::new(BasisFamily::Hermite, 10, 5.0, 0.5).unwrap();
        let method = if su { Method::Su } else { Method::Em };
        let fixed = run_filter(&spec, &basis, method, &bundle, &zakai_core::galerkin::initial_coefficients(&spec, &basis).unwrap());
        let aga = run_aga_with(&spec, &basis, method, &bundle, &AgaConfig::never(), &FilterOptions::default());
        let (fixed, aga) = (fixed.unwrap(), aga.unwrap());
        prop_assume!(aga.iter().all(|e| !e.rebased));
        for (a, b) in fixed.iter().zip(&aga) {
            prop_assert_eq!(a.mean1().to_bits(), b.mean1().to_bits());
            prop_assert_eq!(a.var1().to_bits(), b.var1().to_bits());
        }
    }

    #[test]
    fn one_dimensional_tensor_path_matches_line_filter(seed in 0u64..1000, su in any::<bool>()) {
        let p = LinearModelParams::paper_defaults(2.0, 0.0);
        let spec = make_linear_model(&p).unwrap();
        let bundle = simulate_bundle(&spec, 1e-3, 100, seed).unwrap();
        let basis = BasisSpec::new(BasisFamily::Hermite, 10, 5.0, 0.3).unwrap();
        let method = if su { Method::Su } else { Method::Em };
        let line = run_filter(&spec, &basis, method, &bundle, &zakai_core::galerkin::initial_coefficients(&spec, &basis).unwrap()).unwrap();
        let tensor = run_filter_md(&spec, &TensorBasisSpec::from_line(&basis), method, &bundle).unwrap();
        for (a, b) in line.iter().zip(&tensor) {
            prop_assert_eq!(a.mean1().to_bits(), b.mean1().to_bits());
            prop_assert_eq!(a.var1().to_bits(), b.var1().to_bits());
        }
    }

    #[test]
    fn rebase_preserves_moments(shift in -0.5..0.5f64, stretch in 0.8..1.25f64) {
        // widening the basis needs more terms, so the error is checked to shrink with n
        let rule = gauss_hermite(200).unwrap();
        let mut errs = Vec::new();
        for n in [24, 39] {
            let basis = BasisSpec::new(BasisFamily::Hermite, n, 1.0, 1.0).unwrap();
            let c = gaussian_coefficients(&basis, 1.3, 0.9).unwrap();
            let state = FilterState { coeffs: c, log_scale: 0.0, basis, t: 0.0 };
            let before = conditional_moments(&state, coeff_table()).unwrap();
            let moved = rebase(&state, 1.0 + shift, stretch, &rule).unwrap();
            let after = conditional_moments(&moved, coeff_table()).unwrap();
            errs.push((before.mean1() - after.mean1()).abs().max((before.var1() - after.var1()).abs()));
        }
        prop_assert!(errs[1] < 1e-4, "n = 39 error {:e}", errs[1]);
        prop_assert!(errs[1] <= errs[0] + 1e-9);
    }

    #[test]
    fn kronecker_sum_structure(n in 3usize..8, mu in -1.0..1.0f64, sd in 0.5..1.5f64, lambda in 0.0..5.0f64) {
        let p = LinearModelParams { b: -0.3, sigma: 0.7, h: 1.5, lambda, mu0: 0.0, var0: 1.0 };
        let line = BasisSpec::new(BasisFamily::Hermite, n, mu, sd).unwrap();
        let tensor = TensorBasisSpec::new(n, vec![mu; 2], vec![sd; 2]).unwrap();
        let one = affine_tensor_matrices(make_linear_model(&p).unwrap().affine().unwrap(), &TensorBasisSpec::from_line(&line)).unwrap();
        let two = affine_tensor_matrices(make_decoupled_linear_model(&p, 2).unwrap().affine().unwrap(), &tensor).unwrap();
        let eye = DMatrix::<f64>::identity(n, n);
        prop_assert!((&two.a - (one.a.kronecker(&eye) + eye.kronecker(&one.a))).amax() <= 1e-8);
        prop_assert!((&two.b[0] - one.b[0].kronecker(&eye)).amax() <= 1e-8);
        prop_assert!((&two.b[1] - eye.kronecker(&one.b[0])).amax() <= 1e-8);
        prop_assert!((&two.c - one.c.kronecker(&eye)).amax() <= 1e-8);
    }

    #[test]
    fn tensor_index_round_trip(d in 1usize..4, n in 1usize..6) {
        let basis = TensorBasisSpec::new(n, vec![0.0; d], vec![1.0; d]).unwrap();
        for flat in 1..=basis.size() {
            let multi = tensor_multi_index(&basis, flat).unwrap();
            prop_assert_eq!(tensor_index(&basis, &multi).unwrap(), flat);
        }
    }

    #[test]
    fn systematic_resampling_counts_ignore_labels(
        raw in proptest::collection::vec(0.01..1.0f64, 2..40), u in 0.0..1.0f64, rot in 0usize..40,
    ) {
        let n = raw.len();
        let positions: Vec<Vec<f64>> = (0..n).map(|k| vec![k as f64]).collect();
        let cloud = ParticleCloud { positions, log_weights: raw.iter().map(|w| w.ln()).collect(), ess: n as f64 };
        let mut relabeled = cloud.clone();
        relabeled.positions.rotate_left(rot % n);
        relabeled.log_weights.rotate_left(rot % n);

        let mut a = cloud.clone();
        let mut b = relabeled.clone();
        prop_assert!(a.normalize() && b.normalize());
        let (ma, va) = a.moments();
        let (mb, vb) = b.moments();
        prop_assert!(close(ma[0], mb[0], 1e-12) && close(va[0], vb[0], 1e-12));

        // each particle is copied floor(N w) or ceil(N w) times under any labeling
        let weights = a.weights();
        for mut c in [a, b] {
            c.resample_systematic(u);
            for (k, w) in weights.iter().enumerate() {
                let copies = c.positions.iter().filter(|p| p[0] == k as f64).count() as f64;
                let target = n as f64 * w;
                prop_assert!(copies >= target.floor() - 1e-9 && copies <= target.ceil() + 1e-9);
            }
        }
    }

    #[test]
    fn kalman_bucy_variance_bounded_by_prior_propagation(h in 0.1..10.0f64, b in -1.0..1.0f64, seed in 0u64..100) {
        let p = LinearModelParams { b, sigma: 1.0, h, lambda: 0.0, mu0: 0.0, var0: 2.0 };
        let bundle = simulate_bundle(&make_linear_model(&p).unwrap(), 1e-3, 300, seed).unwrap();
        let (_, v) = kalman_bucy(&p, &bundle).unwrap();
        let (_, blind) = kalman_bucy(&LinearModelParams { h: 0.0, ..p }, &bundle).unwrap();
        for (a, c) in v.iter().zip(&blind) {
            prop_assert!(*a > 0.0 && *a <= *c * (1.0 + 1e-12));
        }
    }

    #[test]
    fn path_csv_round_trip_is_lossless(seed in 0u64..1000, lambda in 0.0..20.0f64) {
        let spec = make_linear_model(&LinearModelParams::paper_defaults(1.0, lambda)).unwrap();
        let bundle = simulate_bundle(&spec, 1e-3, 50, seed).unwrap();
        let mut buf = Vec::new();
        bundle.write_csv(&mut buf).unwrap();
        let back = PathBundle::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(&back.x_path, &bundle.x_path);
        prop_assert_eq!(&back.dz, &bundle.dz);
        prop_assert_eq!(&back.dn, &bundle.dn);
        prop_assert_eq!(&back.times, &bundle.times);
    }
}

#[test]
fn simulation_is_reproducible() {
    let spec = make_linear_model(&LinearModelParams::paper_defaults(1.0, 5.0)).unwrap();
    let a = simulate_bundle(&spec, 1e-3, 500, 42).unwrap();
    let b = simulate_bundle(&spec, 1e-3, 500, 42).unwrap();
    let c = simulate_bundle(&spec, 1e-3, 500, 43).unwrap();
    assert_eq!(a.x_path, b.x_path);
    assert_eq!(a.dz, b.dz);
    assert_eq!(a.dn, b.dn);
    assert_ne!(a.x_path, c.x_path);
    let pa = particle_filter(&spec, &a, 200, 1).unwrap();
    let pb = particle_filter(&spec, &b, 200, 1).unwrap();
    assert!(pa.iter().zip(&pb).all(|(x, y)| x.mean == y.mean && x.variance == y.variance));
}

#[test]
fn estimate_csv_has_one_row_per_step() {
    let spec = make_linear_model(&LinearModelParams::paper_defaults(1.0, 0.0)).unwrap();
    let bundle = simulate_bundle(&spec, 1e-3, 20, 5).unwrap();
    let basis = BasisSpec::new(BasisFamily::Hermite, 8, 5.0, 0.3).unwrap();
    let q0 = zakai_core::galerkin::initial_coefficients(&spec, &basis).unwrap();
    let out = run_filter(&spec, &basis, Method::Su, &bundle, &q0).unwrap();
    let mut buf = Vec::new();
    write_estimates_csv(&out, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let means: Vec<f64> = rows.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(means.len(), out.len());
    assert!(means.iter().zip(&out).all(|(m, e)| *m == e.mean1()));
}

/// Coupled two-dimensional affine model and the same model with its axes swapped.
fn coupled_pair() -> (ModelSpec, ModelSpec) {
    let build = |perm: [usize; 2]| {
        let drift = DMatrix::from_row_slice(2, 2, &[-0.4, 0.3, -0.2, -0.6]);
        let diffusion = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.0, 0.5]);
        let obs = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.0, 2.0]);
        let mu0 = [0.3, -0.2];
        let var0 = [0.5, 0.8];
        let lam = [2.0, 1.0];
        let pm = |m: &DMatrix<f64>| DMatrix::from_fn(2, 2, |i, j| m[(perm[i], perm[j])]);
        // the noise channels stay, only the state axes are relabeled
        let diff = DMatrix::from_fn(2, 2, |i, j| diffusion[(perm[i], j)]);
        let obs_p = DMatrix::from_fn(2, 2, |i, j| obs[(i, perm[j])]);
        let structure = AffineStructure {
            drift: pm(&drift),
            drift_offset: DVector::zeros(2),
            diffusion: diff,
            obs: obs_p,
            obs_offset: DVector::zeros(2),
            intensity: Some(QuadraticIntensity {
                base: 0.5,
                diag: DVector::from_iterator(2, perm.iter().map(|&k| lam[k])),
            }),
        };
        ModelSpec::from_affine(
            structure,
            IntensityBounds::default(),
            DVector::from_iterator(2, perm.iter().map(|&k| mu0[k])),
            DMatrix::from_diagonal(&DVector::from_iterator(2, perm.iter().map(|&k| var0[k]))),
        )
        .unwrap()
    };
    (build([0, 1]), build([1, 0]))
}

#[test]
fn relabeling_axes_permutes_estimates() {
    let (spec, swapped) = coupled_pair();
    for seed in [1u64, 2, 3] {
        let bundle = simulate_bundle(&spec, 1e-3, 150, seed).unwrap();
        let mut relabeled = bundle.clone();
        for x in relabeled.x_path.iter_mut() {
            x.swap(0, 1);
        }
        let basis = TensorBasisSpec::new(8, vec![0.3, -0.2], vec![0.8, 0.9]).unwrap();
        let basis_sw = TensorBasisSpec::new(8, vec![-0.2, 0.3], vec![0.9, 0.8]).unwrap();
        let a = run_filter_md(&spec, &basis, Method::Su, &bundle).unwrap();
        let b = run_filter_md(&swapped, &basis_sw, Method::Su, &relabeled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(close(x.mean[0], y.mean[1], 1e-9) && close(x.mean[1], y.mean[0], 1e-9));
            assert!(close(x.variance[0], y.variance[1], 1e-9) && close(x.variance[1], y.variance[0], 1e-9));
        }
        // the initial projections are permutations of each other as well
        let q = initial_coefficients_md(&spec, &basis).unwrap();
        let q_sw = initial_coefficients_md(&swapped, &basis_sw).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert!(close(q[i * 8 + j], q_sw[j * 8 + i], 1e-12));
            }
        }
    }
}
