//! Randomized invariants over the public API.

use proptest::prelude::*;
use rotlab::analysis::classification_risk;
use rotlab::datagen::{c_mu, sample, Dataset, MixtureParams};
use rotlab::egop::{estimate_egop, SamplingSpec};
use rotlab::linalg::{
    apply_param_rotation, inv_root, orthogonality_defect, param_rotation, rotate2, rotation_matrix, sym_eig,
    Matrix, RootPower, DEFAULT_EIG_FLOOR,
};
use rotlab::loss::{p_gamma_terms, SampleLoss};
use rotlab::model::{
    forward, make_fixed_outer_two_layer, make_full_two_layer, make_mlp, rademacher_outer, Architecture,
    InitSpec, ParamVector,
};
use rotlab::optim::{run, signgd_direction, GradOracle, OptimizerSpec, RunOptions};
use std::f64::consts::PI;

fn network(family: u8, width: usize, seed: u64) -> (Architecture, ParamVector) {
    match family % 4 {
        0 => make_fixed_outer_two_layer(2, width, &rademacher_outer(width, seed), seed).unwrap(),
        1 => make_full_two_layer(2, width, seed).unwrap(),
        2 => make_mlp(2, &[width, 3], true, InitSpec::new(seed)).unwrap(),
        _ => make_mlp(2, &[width], false, InitSpec::new(seed)).unwrap(),
    }
}

fn symmetric(n: usize, entries: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m.set(i, j, entries[k]);
            m.set(j, i, entries[k]);
            k += 1;
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotated_network_matches_rotated_input(
        family in 0u8..4, width in 1usize..10, seed in any::<u64>(),
        gamma in -PI..PI, x1 in -5.0..5.0f64, x2 in -5.0..5.0f64,
    ) {
        let (arch, theta) = network(family, width, seed);
        let u = rotation_matrix(gamma);
        let rotated = apply_param_rotation(&u, &arch, &theta, true).unwrap();
        let ux = rotate2(gamma, [x1, x2]);
        let a = forward(&arch, &rotated, &ux).unwrap();
        let b = forward(&arch, &theta, &[x1, x2]).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        let q = param_rotation(&u, &arch).unwrap();
        prop_assert!(orthogonality_defect(q.matrix()) <= 1e-12);
    }

    #[test]
    fn eigendecomposition_reconstructs(n in 1usize..7, entries in prop::collection::vec(-3.0..3.0f64, 28)) {
        let a = symmetric(n, &entries);
        let e = sym_eig(&a).unwrap();
        let v = e.eigenvectors.matrix();
        let d = Matrix::from_diag(&e.eigenvalues);
        let back = v.matmul(&d).unwrap().matmul(&v.transpose()).unwrap();
        prop_assert!(back.max_abs_diff(&a) <= 1e-10 * (1.0 + a.max_abs()));
        prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn quarter_root_inverts(n in 1usize..6, entries in prop::collection::vec(-2.0..2.0f64, 36)) {
        // AᵀA + I is well conditioned and positive definite
        let b = Matrix::from_row_major(n, n, entries[..n * n].to_vec()).unwrap();
        let a = b.transpose().matmul(&b).unwrap().add(&Matrix::identity(n)).unwrap();
        let r = inv_root(&a, RootPower::Quarter, DEFAULT_EIG_FLOOR).unwrap();
        let r2 = r.matmul(&r).unwrap();
        let prod = r2.matmul(&r2).unwrap().matmul(&a).unwrap();
        prop_assert!(prod.max_abs_diff(&Matrix::identity(n)) <= 1e-9);
    }

    #[test]
    fn weighted_probability_sum_bounded_below(
        omega in 1.01..30.0f64, mu in 0.01..6.0f64, sigma in 0.05..6.0f64,
        gamma in 0.0..2.0 * PI, w1 in -1.0..1.0f64, w2 in -1.0..1.0f64,
    ) {
        prop_assume!(w1.abs() + w2.abs() > 1e-6);
        let params = MixtureParams::new(omega, mu, sigma).unwrap();
        let t = p_gamma_terms(&params, gamma, [w1, w2]).unwrap();
        prop_assert!(t.weighted_sum() >= c_mu(&params) - 1e-12);
        for p in [t.p_plus, t.p_pm, t.p_minus] {
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn rotated_sample_is_rotated_base_sample(gamma in -PI..PI, seed in any::<u64>(), n in 1usize..200) {
        let params = MixtureParams::reference();
        let base = sample(&params, 0.0, n, seed).unwrap();
        let rot = sample(&params, gamma, n, seed).unwrap();
        prop_assert_eq!(&base.labels, &rot.labels);
        for (x, y) in base.features.iter().zip(&rot.features) {
            let ux = rotate2(gamma, *x);
            prop_assert!((ux[0] - y[0]).abs() <= 1e-12 * (1.0 + x[0].abs() + x[1].abs()));
            prop_assert!((ux[1] - y[1]).abs() <= 1e-12 * (1.0 + x[0].abs() + x[1].abs()));
        }
    }

    #[test]
    fn dataset_csv_round_trips(gamma in -PI..PI, seed in any::<u64>(), n in 1usize..50) {
        let params = MixtureParams::reference();
        let d = sample(&params, gamma, n, seed).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), params, gamma, seed).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn sign_direction_is_bounded_and_odd(g in -1e6..1e6f64, eps in 0.0..10.0f64) {
        let s = signgd_direction(g, eps);
        prop_assert!(s.abs() <= 1.0);
        prop_assert_eq!(signgd_direction(-g, eps), -s);
        prop_assert!(s * g >= 0.0);
    }

    #[test]
    fn egop_is_symmetric_psd(seed in any::<u64>(), scale in 0.1..2.0f64) {
        let (arch, _) = make_full_two_layer(2, 3, 1).unwrap();
        let data = sample(&MixtureParams::reference(), 0.3, 64, 5).unwrap();
        let oracle = SampleLoss::from_dataset(arch, &data).unwrap();
        let est = estimate_egop(&oracle, SamplingSpec::new(scale, seed).unwrap(), 12).unwrap();
        prop_assert_eq!(est.matrix.asymmetry(), 0.0);
        let e = sym_eig(&est.matrix).unwrap();
        prop_assert!(*e.eigenvalues.last().unwrap() >= -1e-12 * (1.0 + e.eigenvalues[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gd_runs_are_rotation_equivariant(gamma in -PI..PI, seed in 0u64..1000, momentum in 0.0..0.95f64) {
        let (arch, theta) = make_full_two_layer(2, 5, seed).unwrap();
        let params = MixtureParams::reference();
        let base = SampleLoss::from_dataset(arch.clone(), &sample(&params, 0.0, 300, seed).unwrap()).unwrap();
        let rot = SampleLoss::from_dataset(arch.clone(), &sample(&params, gamma, 300, seed).unwrap()).unwrap();
        let u = rotation_matrix(gamma);
        let spec = OptimizerSpec::Gd { eta: 0.05, momentum };
        let a = run(&spec, &base, Some(&arch), &theta, RunOptions::new(25)).unwrap();
        let start = apply_param_rotation(&u, &arch, &theta, true).unwrap();
        let b = run(&spec, &rot, Some(&arch), &start, RunOptions::new(25)).unwrap();
        let expect = apply_param_rotation(&u, &arch, a.final_theta(), true).unwrap();
        let gap = expect.iter().zip(b.final_theta()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-10, "gap {}", gap);
        prop_assert_eq!(base.dim(), rot.dim());
    }

    #[test]
    fn risk_lies_in_unit_interval(gamma in -PI..PI, seed in any::<u64>(), tilt in -1.0..1.0f64) {
        let params = MixtureParams::reference();
        let r = classification_risk(move |x: [f64; 2]| x[0] + tilt * x[1], &params, gamma, 10_000, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.risk));
        prop_assert!(r.bayes_risk <= r.risk + 5.0 * r.excess_stderr + 1e-12);
    }
}
