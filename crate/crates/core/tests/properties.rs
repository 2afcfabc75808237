use eki_core::linalg::{cholesky, symmetric_eigen};
use eki_core::metrics::{w2_assignment, w2_semidiscrete_1d, w2_sorted_1d};
use eki_core::{
    eki_discrete_step, eki_sde_step, ensemble_stats, gaussian_flow, Ensemble, ForwardModel,
    GaussianDensity, Matrix, NoiseStream, Prior, SpdMatrix,
};
use proptest::prelude::*;

fn spd(dim: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim * dim).prop_map(move |v| {
        let b = Matrix::new(dim, dim, v).unwrap();
        b.matmul(&b.transpose()).add(&Matrix::identity(dim).scale(0.1))
    })
}

fn points(n: usize, dim: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, n * dim).prop_map(move |v| Matrix::new(n, dim, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_round_trip(m in (1usize..6).prop_flat_map(spd)) {
        let l = cholesky(&m).unwrap();
        let back = l.matmul(&l.transpose());
        prop_assert!(back.sub(&m).max_abs() <= 1e-12 * (1.0 + m.max_abs()));
    }

    #[test]
    fn assignment_is_symmetric(
        (a, b) in (1usize..24, 1usize..4).prop_flat_map(|(n, d)| (points(n, d), points(n, d)))
    ) {
        let ab = w2_assignment(&a, &b).unwrap().value;
        let ba = w2_assignment(&b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn assignment_triangle_inequality(
        (a, b, c) in (1usize..32, 1usize..4)
            .prop_flat_map(|(n, d)| (points(n, d), points(n, d), points(n, d)))
    ) {
        let ab = w2_assignment(&a, &b).unwrap().value;
        let bc = w2_assignment(&b, &c).unwrap().value;
        let ac = w2_assignment(&a, &c).unwrap().value;
        prop_assert!(ab + bc - ac >= -1e-9);
    }

    #[test]
    fn empirical_distances_scale_and_translate(
        (a, b) in (1usize..20).prop_flat_map(|n| (points(n, 2), points(n, 2))),
        s in 0.1f64..5.0,
        shift in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let base = w2_assignment(&a, &b).unwrap().value;
        let scaled = w2_assignment(&a.scale(s), &b.scale(s)).unwrap().value;
        prop_assert!((scaled - s * base).abs() <= 1e-10 * (1.0 + s * base));
        let move_by = |m: &Matrix<f64>| Matrix::from_fn(m.rows(), 2, |i, j| m[(i, j)] + shift[j]);
        let moved = w2_assignment(&move_by(&a), &move_by(&b)).unwrap().value;
        prop_assert!((moved - base).abs() <= 1e-12 * (1.0 + base) * 10.0);

        let xa = a.col_vec(0);
        let xb = b.col_vec(0);
        let sorted = w2_sorted_1d(&xa, &xb).unwrap().value;
        let sa: Vec<f64> = xa.iter().map(|x| s * x).collect();
        let sb: Vec<f64> = xb.iter().map(|x| s * x).collect();
        prop_assert!((w2_sorted_1d(&sa, &sb).unwrap().value - s * sorted).abs() <= 1e-12 * (1.0 + s * sorted));
        let ta: Vec<f64> = xa.iter().map(|x| x + shift[0]).collect();
        let tb: Vec<f64> = xb.iter().map(|x| x + shift[0]).collect();
        prop_assert!((w2_sorted_1d(&ta, &tb).unwrap().value - sorted).abs() <= 1e-12 * (1.0 + sorted) * 10.0);
    }

    #[test]
    fn semidiscrete_scales_and_translates(
        xs in prop::collection::vec(-3.0f64..3.0, 1..40),
        s in 0.2f64..4.0,
        c in -2.0f64..2.0,
    ) {
        let g = GaussianDensity::new(vec![0.0], SpdMatrix::identity(1)).unwrap();
        let q = g.quantile_fn().unwrap();
        let base = w2_semidiscrete_1d(&xs, q.clone(), 16).unwrap().value;
        let moved: Vec<f64> = xs.iter().map(|x| s * x + c).collect();
        let q2 = q.clone();
        let other = w2_semidiscrete_1d(&moved, move |p| s * q2(p) + c, 16).unwrap().value;
        prop_assert!((other - s * base).abs() <= 1e-9 * (1.0 + s * base));
    }

    #[test]
    fn discrete_mean_update_identity(
        particles in points(8, 2),
        y in prop::collection::vec(-2.0f64..2.0, 3),
        h in 0.01f64..1.0,
    ) {
        // with noise off, the mean moves by Cup(Cpp + Γ/h)⁻¹(y − Ḡ)
        let a = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 1.0], vec![0.2, 0.2]]).unwrap();
        let gamma = SpdMatrix::from_diag(&[0.5, 1.0, 2.0]).unwrap();
        let model = ForwardModel::linear(a, gamma.clone(), y.clone()).unwrap();
        let ens = Ensemble::new(particles, 0.0).unwrap();
        let stats = ensemble_stats(&ens, &model);
        let next = eki_discrete_step(&ens, &model, h, &NoiseStream::zero().trial(0), 1).unwrap();
        let system = SpdMatrix::new(stats.cpp.add(&gamma.matrix().scale(1.0 / h)).symmetrized()).unwrap();
        let misfit: Vec<f64> = y.iter().zip(&stats.mean_g).map(|(a, b)| a - b).collect();
        let shift = stats.cup.matvec(&system.solve(&misfit));
        for (i, m) in next.mean().iter().enumerate() {
            prop_assert!((m - stats.mean_u[i] - shift[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn sde_mean_update_identity(particles in points(8, 2), h in 0.001f64..0.5) {
        let a = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 1.0]]).unwrap();
        let model = ForwardModel::linear(a, SpdMatrix::identity(2), vec![1.0, -1.0]).unwrap();
        let ens = Ensemble::new(particles, 0.0).unwrap();
        let stats = ensemble_stats(&ens, &model);
        let next = eki_sde_step(&ens, &model, h, &NoiseStream::zero().trial(0), 1).unwrap();
        let misfit: Vec<f64> = model.data().iter().zip(&stats.mean_g).map(|(a, b)| a - b).collect();
        let shift = stats.cup.matvec(&misfit);
        for (i, m) in next.mean().iter().enumerate() {
            prop_assert!((m - stats.mean_u[i] - h * shift[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn statistics_are_permutation_invariant(particles in points(6, 2), rot in 0usize..6) {
        let a = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.3, 1.0]]).unwrap();
        let model = ForwardModel::linear(a, SpdMatrix::identity(2), vec![1.0, -1.0]).unwrap();
        let permuted = Matrix::from_fn(6, 2, |i, j| particles[((i + rot) % 6, j)]);
        let s1 = ensemble_stats(&Ensemble::new(particles, 0.0).unwrap(), &model);
        let s2 = ensemble_stats(&Ensemble::new(permuted, 0.0).unwrap(), &model);
        prop_assert!(s1.cup.sub(&s2.cup).max_abs() <= 1e-12);
        prop_assert!(s1.cpp.sub(&s2.cpp).max_abs() <= 1e-12);
    }

    #[test]
    fn flow_covariance_is_monotone(c0 in spd(2), s in 0.0f64..1.0, dt in 0.0f64..1.0) {
        let a = Matrix::from_rows(&[vec![1.0, 0.2], vec![0.3, -0.7], vec![0.0, 1.0]]).unwrap();
        let model = ForwardModel::linear(a, SpdMatrix::from_diag(&[1.0, 0.5, 2.0]).unwrap(), vec![0.0; 3]).unwrap();
        let prior = Prior::new(vec![0.0, 0.0], SpdMatrix::new(c0).unwrap()).unwrap();
        let t = s + dt * (1.0 - s);
        let cs = gaussian_flow(&prior, &model, s).unwrap();
        let ct = gaussian_flow(&prior, &model, t).unwrap();
        let diff = cs.cov.matrix().sub(ct.cov.matrix());
        prop_assert!(symmetric_eigen(&diff).values[0] >= -1e-12);
    }
}

#[test]
fn single_precision_tracks_double() {
    let a = Matrix::<f32>::from_rows(&[vec![1.0], vec![0.5]]).unwrap();
    let model32 = ForwardModel::linear(a, SpdMatrix::identity(2), vec![1.0, 0.5]).unwrap();
    let model64 = ForwardModel::linear(
        Matrix::<f64>::from_rows(&[vec![1.0], vec![0.5]]).unwrap(),
        SpdMatrix::identity(2),
        vec![1.0, 0.5],
    )
    .unwrap();
    let noise = NoiseStream::new(5).trial(0);
    let mut e32 = Ensemble::from_prior(&Prior::<f32>::standard(1), 64, &noise).unwrap();
    let mut e64 = Ensemble::from_prior(&Prior::<f64>::standard(1), 64, &noise).unwrap();
    for n in 1..=20 {
        e32 = eki_sde_step(&e32, &model32, 0.05, &noise, n).unwrap();
        e64 = eki_sde_step(&e64, &model64, 0.05, &noise, n).unwrap();
    }
    let gap = e32
        .particles()
        .cast::<f64>()
        .sub(e64.particles())
        .max_abs();
    assert!(gap < 1e-4, "gap {gap}");
}
