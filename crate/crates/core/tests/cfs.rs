use approx::assert_relative_eq;
use cvp_core::cfs::*;
use cvp_core::el::{calibrate_nu, weak_el_residual};
use cvp_core::jet::TestBasis;
use cvp_core::lagrangian::LagrangianModel;
use cvp_core::mixing::{haar_unitary, unitary_pushforward};
use cvp_core::CvpError;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn diag(values: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&DVector::from_iterator(values.len(), values.iter().map(|v| C64::new(*v, 0.0))))
}

fn params(f: usize, n: usize, c: f64, kappa: f64) -> CfsParams {
    CfsParams::new(f, n, c, kappa).unwrap()
}

fn random_point(p: &CfsParams, rng: &mut ChaCha8Rng) -> CfsPoint {
    let n = p.spin_dim;
    loop {
        let mut eig = vec![0.0; p.hilbert_dim];
        for k in 0..n {
            eig[k] = rng.gen_range(0.5..2.0);
            eig[n + k] = -rng.gen_range(0.5..2.0);
        }
        let sum: f64 = eig.iter().sum();
        eig[0] += p.trace_constant - sum;
        if eig[0] <= 0.1 {
            continue;
        }
        let u = haar_unitary(p.hilbert_dim, rng);
        let m = &u * diag(&eig) * u.adjoint();
        let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        return CfsPoint::new(m, p).unwrap();
    }
}

// Eigenvalues of a 2×2 complex matrix from its trace and determinant.
fn eig2(m: &CMatrix) -> [C64; 2] {
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (tr * tr - det * 4.0).sqrt();
    [(tr + disc) / 2.0, (tr - disc) / 2.0]
}

fn multiset_distance(a: &[C64], b: &[C64]) -> f64 {
    let mut rest = b.to_vec();
    let mut worst = 0.0f64;
    for x in a {
        let (k, d) = rest.iter().enumerate().map(|(k, y)| (k, (x - y).norm())).fold((0, f64::INFINITY), |m, c| if c.1 < m.1 { c } else { m });
        worst = worst.max(d);
        rest.remove(k);
    }
    worst
}

#[test]
fn spectral_weights_of_diagonal_pair() {
    let p = params(2, 1, 1.0, 0.0);
    let x = CfsPoint::new(diag(&[2.0, -1.0]), &p).unwrap();
    let sw = spectral_weights(&x, &x, &p).unwrap();
    let oracle = eig2(&(x.matrix() * x.matrix()));
    let mut moduli: Vec<f64> = oracle.iter().map(|l| l.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    assert_relative_eq!(sw.moduli()[0], moduli[0], epsilon = 1e-12);
    assert_relative_eq!(sw.moduli()[1], moduli[1], epsilon = 1e-12);
    assert_relative_eq!(sw.abs_sum, 5.0, epsilon = 1e-12);
    assert_relative_eq!(sw.abs_sq_sum, 17.0, epsilon = 1e-12);
    let (value, class) = causal_lagrangian(&x, &x, &p).unwrap();
    assert_relative_eq!(value, 4.5, epsilon = 1e-12);
    assert_eq!(class, CausalClass::Timelike);
}

#[test]
fn complex_pair_is_spacelike() {
    let p = params(2, 1, 1.0, 0.0);
    let x = CfsPoint::new(real_matrix(&DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 0.5])), &p).unwrap();
    let y = CfsPoint::new(diag(&[1.5, -0.5]), &p).unwrap();
    let sw = spectral_weights(&x, &y, &p).unwrap();
    let oracle = eig2(&(x.matrix() * y.matrix()));
    assert_relative_eq!(oracle[0].norm() * oracle[1].norm(), 0.5625, epsilon = 1e-12);
    for m in sw.moduli() {
        assert_relative_eq!(m, 0.75, epsilon = 1e-12);
    }
    assert!(sw.eigenvalues[0].im.abs() > 0.1);
    assert_relative_eq!(sw.abs_sum, 1.5, epsilon = 1e-12);
    assert_relative_eq!(sw.abs_sq_sum, 1.125, epsilon = 1e-12);
    let (value, class) = causal_lagrangian(&x, &y, &p).unwrap();
    assert!(value.abs() < 1e-12);
    assert_eq!(class, CausalClass::Spacelike);
    let pk = params(2, 1, 1.0, 0.1);
    assert_relative_eq!(causal_lagrangian(&x, &y, &pk).unwrap().0, 0.225, epsilon = 1e-12);
}

#[test]
fn padded_zero_operator_gives_zero_weights() {
    let p = params(3, 1, 1.0, 0.0);
    let x = diag(&[2.0, -1.0, 0.0]);
    let sw = spectral_weights_of(&x, &CMatrix::zeros(3, 3), &p).unwrap();
    assert!(sw.abs_sum < 1e-14);
}

#[test]
fn quarter_sum_identity_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [1, 2] {
        let p = params(2 * n + 1, n, 1.0, 0.0);
        for _ in 0..200 {
            let (x, y) = (random_point(&p, &mut rng), random_point(&p, &mut rng));
            let sw = spectral_weights(&x, &y, &p).unwrap();
            let a = lagrangian_from_weights(&sw, n, 0.0);
            let b = lagrangian_quarter_sum(&sw, n);
            assert!((a - b).abs() <= 1e-10 * (1.0 + sw.abs_sq_sum), "{a} {b}");
            assert!(b >= 0.0);
        }
    }
}

#[test]
fn chain_is_symmetric_and_unitarily_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [1, 2] {
        let p = params(2 * n + 1, n, 1.0, 0.0);
        for _ in 0..20 {
            let (x, y) = (random_point(&p, &mut rng), random_point(&p, &mut rng));
            let xy = spectral_weights(&x, &y, &p).unwrap();
            let yx = spectral_weights(&y, &x, &p).unwrap();
            assert!(multiset_distance(&xy.eigenvalues, &yx.eigenvalues) < 1e-9);
            let u = haar_unitary(p.hilbert_dim, &mut rng);
            let rot = spectral_weights(&x.conjugated(&u), &y.conjugated(&u), &p).unwrap();
            assert_relative_eq!(rot.abs_sum, xy.abs_sum, epsilon = 1e-10);
            assert_relative_eq!(rot.abs_sq_sum, xy.abs_sq_sum, epsilon = 1e-10);
        }
    }
}

#[test]
fn wave_evaluation_reproduces_points_and_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params(5, 2, 1.0, 0.0);
    let points: Vec<CfsPoint> = (0..3).map(|_| random_point(&p, &mut rng)).collect();
    let system = CfsSystem::new(p, points.clone(), vec![1.0; 3]).unwrap();
    let weo = WaveEvaluation::from_system(&system);
    for (i, x) in points.iter().enumerate() {
        assert!((weo.operator(i) - x.matrix()).norm() < 1e-8);
    }
    let chain = weo.kernel(0, 1).unwrap() * weo.kernel(1, 0).unwrap();
    let from_chain = complex_eigenvalues(&chain).unwrap();
    let direct = spectral_weights(&points[0], &points[1], &p).unwrap();
    let mut a: Vec<f64> = from_chain.iter().map(|l| l.norm()).collect();
    a.sort_by(|x, y| y.total_cmp(x));
    for (x, y) in a.iter().zip(direct.moduli()) {
        assert_relative_eq!(*x, y, epsilon = 1e-8);
    }
    assert!(matches!(weo.kernel(0, 5), Err(CvpError::IndexError(_))));
}

#[test]
fn local_correlation_examples() {
    let p = params(2, 1, 1.0, 0.0);
    let psi = SpinMap::new(diag(&[2f64.sqrt(), 1.0]), &p).unwrap();
    let r = local_correlation(&psi, &p).unwrap();
    assert!((r.matrix() - diag(&[2.0, -1.0])).norm() < 1e-14);
    let scaled = SpinMap::new(&psi.psi * C64::new(0.3, -1.7), &p).unwrap();
    assert!((local_correlation(&scaled, &p).unwrap().matrix() - r.matrix()).norm() < 1e-13);
    let null = SpinMap::new(diag(&[1.0, 1.0]), &p).unwrap();
    assert!(matches!(local_correlation(&null, &p), Err(CvpError::VanishingLocalTrace { .. })));
}

#[test]
fn local_correlation_has_exact_trace_and_bounded_signature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (f, n) in [(2, 1), (4, 1), (5, 2)] {
        let p = params(f, n, 2.5, 0.0);
        for _ in 0..50 {
            let psi = CMatrix::from_fn(2 * n, f, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let r = local_correlation(&SpinMap::new(psi, &p).unwrap(), &p).unwrap();
            assert!((r.matrix().trace().re - 2.5).abs() < 1e-12);
            let (pos, neg) = r.signature();
            assert!(pos <= n && neg <= n);
        }
    }
}

#[test]
fn causal_action_sums() {
    let p = params(2, 1, 1.0, 0.0);
    let empty = CfsSystem::new(p, vec![], vec![]).unwrap();
    assert_eq!(causal_action(&empty).unwrap(), (0.0, 0.0));
    let x = CfsPoint::new(diag(&[2.0, -1.0]), &p).unwrap();
    let single = CfsSystem::new(p, vec![x.clone()], vec![1.0]).unwrap();
    let (s, t) = causal_action(&single).unwrap();
    assert_relative_eq!(s, 4.5, epsilon = 1e-12);
    assert_relative_eq!(t, 25.0, epsilon = 1e-12);

    let y = CfsPoint::new(real_matrix(&DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 0.5])), &p).unwrap();
    let z = CfsPoint::new(diag(&[1.5, -0.5]), &p).unwrap();
    let pair = CfsSystem::new(p, vec![y.clone(), z.clone()], vec![0.5, 0.5]).unwrap();
    let (s, _) = causal_action(&pair).unwrap();
    let diagonal = 0.25 * (causal_lagrangian(&y, &y, &p).unwrap().0 + causal_lagrangian(&z, &z, &p).unwrap().0);
    assert_relative_eq!(s, diagonal, epsilon = 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p3 = params(3, 1, 1.0, 0.0);
    let pts: Vec<CfsPoint> = (0..4).map(|_| random_point(&p3, &mut rng)).collect();
    let sys = CfsSystem::new(p3, pts, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let (s0, t0) = causal_action(&sys).unwrap();
    let moved = unitary_pushforward(&sys, &haar_unitary(3, &mut rng)).unwrap();
    let (s1, t1) = causal_action(&moved).unwrap();
    assert_relative_eq!(s0, s1, epsilon = 1e-9);
    assert_relative_eq!(t0, t1, epsilon = 1e-9);
}

#[test]
fn point_validation() {
    let p = params(3, 1, 1.0, 0.0);
    assert!(matches!(CfsPoint::new(diag(&[2.0, -1.0, 0.5]), &p), Err(CvpError::InvalidPoint(_))));
    assert!(matches!(CfsPoint::new(diag(&[2.5, -1.0, 0.0]), &p), Err(CvpError::InvalidPoint(_))));
    assert!(matches!(CfsPoint::new(diag(&[2.0, -1.0]), &p), Err(CvpError::ShapeError(_))));
    let mut skew = diag(&[2.0, -1.0, 0.0]);
    skew[(0, 1)] = C64::new(0.1, 0.0);
    assert!(CfsPoint::new(skew, &p).is_err());
    assert!(CfsParams::new(3, 2, 1.0, 0.0).is_err());
    assert!(CfsParams::new(2, 1, 0.0, 0.0).is_err());
}

#[test]
fn chart_dimension_and_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (f, n) in [(2, 1), (3, 1), (4, 2)] {
        let p = params(f, n, 1.0, 0.0);
        let center = p.default_center();
        let chart = Chart::new(&center, &p).unwrap();
        assert_eq!(chart.dim(), 4 * n * f - 4 * n * n - 1);
        assert!(chart.condition.is_finite());
        let origin = chart.point(&vec![0.0; chart.dim()]).unwrap();
        assert!((origin.matrix() - center.matrix()).norm() < 1e-12);
        for _ in 0..5 {
            let coords: Vec<f64> = (0..chart.dim()).map(|_| 0.05 * rng.gen_range(-1.0..1.0)).collect();
            let y = chart.point(&coords).unwrap();
            let back = chart.coords(&y).unwrap();
            let again = chart.point(&back).unwrap();
            assert!((again.matrix() - y.matrix()).norm() < 1e-8);
        }
    }
}

#[test]
fn scaling_direction_makes_chart_singular() {
    let p = params(2, 1, 1.0, 0.0);
    let center = p.default_center();
    let psi = SpinMap::from_point(center.matrix(), &p);
    assert!(matches!(Chart::with_directions(&center, &p, vec![psi.psi.clone()]), Err(CvpError::SingularChart(_))));
    let kernel = correlation_jacobian(&psi, &p);
    assert_eq!(kernel.ncols() - kernel.rank(1e-10 * kernel.norm()), 4 * 1 + 1);
}

#[test]
fn perturbed_wave_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = params(4, 1, 1.0, 0.0);
    let points: Vec<CfsPoint> = (0..2).map(|_| random_point(&p, &mut rng)).collect();
    let sys = CfsSystem::new(p, points, vec![0.5, 0.5]).unwrap();
    let weo = WaveEvaluation::from_system(&sys);
    let zero = vec![CMatrix::zeros(2, 4); 2];
    let same = perturb_wave_evaluation(&weo, &zero, &sys.weights).unwrap();
    for (a, b) in same.points.iter().zip(&sys.points) {
        assert!((a.matrix() - b.matrix()).norm() < 1e-10);
    }
    let mut bump = zero.clone();
    bump[1][(0, 3)] = C64::new(0.05, 0.02);
    let moved = perturb_wave_evaluation(&weo, &bump, &sys.weights).unwrap();
    assert!((moved.points[0].matrix() - sys.points[0].matrix()).norm() < 1e-10);
    assert!((moved.points[1].matrix() - sys.points[1].matrix()).norm() > 1e-4);
    assert!((moved.points[1].matrix().trace().re - 1.0).abs() < 1e-12);
    let mut kill = zero;
    kill[0] = -weo.maps[0].psi.clone();
    kill[0].row_mut(1).fill(C64::new(0.0, 0.0));
    assert!(matches!(perturb_wave_evaluation(&weo, &kill, &sys.weights), Err(CvpError::InvalidPoint(_))));
}

#[test]
fn system_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let p = params(3, 1, 1.0, 0.2);
    let pts: Vec<CfsPoint> = (0..2).map(|_| random_point(&p, &mut rng)).collect();
    let sys = CfsSystem::new(p, pts, vec![0.25, 0.75]).unwrap();
    let back = CfsSystem::from_json(&sys.to_json()).unwrap();
    assert_eq!(back.params, sys.params);
    for (a, b) in back.points.iter().zip(&sys.points) {
        assert!((a.matrix() - b.matrix()).norm() == 0.0);
    }
}

#[test]
fn chart_lagrangian_is_symmetric_and_centered() {
    let p = params(2, 1, 1.0, 0.0);
    let chart = Chart::new(&p.default_center(), &p).unwrap();
    let lag = cfs_as_lagrangian(&chart);
    assert_eq!(lag.dim(), 3);
    let a = [0.02, -0.01, 0.03];
    let b = [-0.03, 0.015, 0.0];
    assert_relative_eq!(lag.value(&a, &b).unwrap(), lag.value(&b, &a).unwrap(), epsilon = 1e-10);
    let c = p.default_center();
    assert_relative_eq!(lag.value(&[0.0; 3], &[0.0; 3]).unwrap(), causal_lagrangian(&c, &c, &p).unwrap().0, epsilon = 1e-12);
    let reg = LagrangianModel::from_registry("cfs", &[("hilbert_dim".to_string(), 2.0)].into()).unwrap();
    assert_eq!(reg.dim(), 3);
}

#[test]
fn unitarily_equivalent_pair_is_critical_for_scalar_tests() {
    let p = params(2, 1, 1.0, 0.0);
    let chart = Chart::new(&p.default_center(), &p).unwrap();
    let lag = cfs_as_lagrangian(&chart);
    let gen = DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.1, 0.0]);
    let u = (real_matrix(&gen) * C64::new(0.0, 1.0)).exp();
    let measure = two_point_chart_measure(&chart, &u).unwrap();
    let nu = calibrate_nu(&measure, &lag, 1e-8).unwrap();
    let res = weak_el_residual(&measure, &lag, nu, &TestBasis::scalar_only(2, chart.dim())).unwrap();
    assert!(res.max_abs() <= 1e-6, "{}", res.max_abs());
}
