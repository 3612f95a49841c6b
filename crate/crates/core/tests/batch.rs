use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use slepbeam::array::{ArrayGeometry, ArrayScenario, ArrivalAngle};
use slepbeam::batch::{self, LeastSquares, SnapshotBatch};
use slepbeam::forward::{build_synthesis, scenario_model};
use slepbeam::slepian;
use slepbeam::C;

fn cnormal(rng: &mut ChaCha8Rng, power: f64) -> C<f64> {
    let s = (power / 2.0).sqrt();
    C::new(rng.sample::<f64, _>(StandardNormal) * s, rng.sample::<f64, _>(StandardNormal) * s)
}

fn scenario(m: usize, n: usize, az_deg: f64) -> ArrayScenario<f64> {
    let g = ArrayGeometry::ula(m, 4e9).unwrap();
    ArrayScenario::new(g, 1e9, ArrivalAngle::from_degrees(az_deg, 0.0), n).unwrap()
}

/// Band-limited test signal as a sum of in-band tones, evaluated exactly.
struct Tones {
    freqs: Vec<f64>,
    amps: Vec<C<f64>>,
}

impl Tones {
    fn new(rng: &mut ChaCha8Rng, bandwidth: f64, count: usize) -> Self {
        let freqs = (0..count).map(|_| rng.random_range(-bandwidth..bandwidth)).collect();
        let amps = (0..count).map(|_| cnormal(rng, 1.0 / count as f64)).collect();
        Tones { freqs, amps }
    }

    fn at(&self, t: f64) -> C<f64> {
        self.freqs
            .iter()
            .zip(&self.amps)
            .map(|(f, a)| a * C::from_polar(1.0, 2.0 * std::f64::consts::PI * f * t))
            .sum()
    }

    fn sample(&self, s: &ArrayScenario<f64>) -> SnapshotBatch<f64> {
        let tau = s.delays();
        let times = s.plan.snapshot_times.clone();
        let fc = s.geometry.carrier;
        let y = DMatrix::from_fn(tau.len(), times.len(), |m, n| {
            C::from_polar(1.0, -2.0 * std::f64::consts::PI * fc * tau[m]) * self.at(times[n] - tau[m])
        });
        SnapshotBatch::new(y, times).unwrap()
    }
}

#[test]
fn in_model_data_is_recovered() {
    let s = scenario(6, 10, 30.0);
    let (_, model) = scenario_model(&s, 1e-4, 8, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let alpha = DVector::from_fn(model.dimension(), |_, _| cnormal(&mut rng, 1.0));
    let y = &model.stacked_matrix * &alpha;
    let batch = SnapshotBatch::from_stacked(&y, 6, s.plan.snapshot_times.clone()).unwrap();
    let sol = batch::solve_ls(&model, &batch, 0.0).unwrap();
    assert!((&sol.coefficients.values - &alpha).norm() <= 1e-9 * alpha.norm());
    assert!(sol.residual <= 1e-9 * y.norm());
    assert!(!sol.ill_conditioned);

    let zero = SnapshotBatch::new(DMatrix::zeros(6, 10), s.plan.snapshot_times.clone()).unwrap();
    assert_eq!(batch::solve_ls(&model, &zero, 0.0).unwrap().coefficients.values.norm(), 0.0);
}

#[test]
fn ridge_solution_matches_normal_equations() {
    let s = scenario(5, 6, 50.0);
    let (_, model) = scenario_model(&s, 1e-4, 8, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = DVector::from_fn(model.rows(), |_, _| cnormal(&mut rng, 1.0));
    let delta = 0.3;
    let ls = LeastSquares::new(&model, delta, "").unwrap();
    let a = &model.stacked_matrix;
    let d = model.dimension();
    let direct = (a.adjoint() * a + DMatrix::from_diagonal_element(d, d, C::new(2.0 * delta, 0.0)))
        .try_inverse()
        .unwrap()
        * a.adjoint()
        * &y;
    assert!((ls.apply(&y).unwrap() - direct).norm() < 1e-10 * y.norm());
}

#[test]
fn rank_deficient_model_is_flagged() {
    // Two identical columns.
    let col = DVector::from_fn(8, |i, _| C::new(i as f64 + 1.0, 0.5));
    let a = DMatrix::from_columns(&[col.clone(), col.clone()]);
    let ls = LeastSquares::from_matrix(&a, 0.0, "").unwrap();
    assert!(ls.ill_conditioned);
    let alpha = ls.apply(&col).unwrap();
    assert!((alpha[0] - alpha[1]).norm() < 1e-8);
    assert!((alpha[0] - C::new(0.5, 0.0)).norm() < 1e-6);
}

#[test]
fn noise_variance_matches_trace() {
    let s = scenario(4, 8, 20.0);
    let (_, model) = scenario_model(&s, 1e-4, 8, None).unwrap();
    let ls = LeastSquares::new(&model, 0.0, "").unwrap();
    let a = &model.stacked_matrix;
    let trace: f64 = (a.adjoint() * a).try_inverse().unwrap().diagonal().iter().map(|z| z.re).sum();
    let sigma2 = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 1000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let eta = DVector::from_fn(model.rows(), |_, _| cnormal(&mut rng, sigma2));
        acc += ls.apply(&eta).unwrap().norm_squared();
    }
    let mc = acc / draws as f64;
    let want = sigma2 * trace;
    assert!((mc - want).abs() <= 0.05 * want, "MC {mc:e} vs {want:e}");
}

#[test]
fn output_noise_gain_approaches_element_count() {
    let m = 8;
    let mut prev = f64::INFINITY;
    for &n in &[8usize, 32, 128] {
        let s = scenario(m, n, 0.0);
        let (basis, model) = scenario_model(&s, 1e-3, 8, None).unwrap();
        let psi = build_synthesis(&basis, model.output_offsets.as_slice(), model.dimension()).unwrap();
        let a = &model.stacked_matrix;
        let cov = &psi * (a.adjoint() * a).try_inverse().unwrap() * psi.adjoint();
        let per_sample = cov.diagonal().iter().map(|z| z.re).sum::<f64>() / n as f64;
        let excess = (per_sample * m as f64 - 1.0).abs();
        assert!(excess < prev, "N={n}: M·variance = {}", per_sample * m as f64);
        prev = excess;
        let predicted = model.dimension() as f64 / (m * n) as f64;
        assert!((per_sample / predicted - 1.0).abs() < 0.35, "N={n}: {per_sample} vs {predicted}");
    }
    assert!(prev < 0.2);
}

#[test]
fn lossless_snapshot_encoding_matches_full_solve() {
    let s = scenario(6, 8, 10.0);
    let (_, model) = scenario_model(&s, 1e-4, 8, None).unwrap();
    let d1 = (2.0 * s.bandwidth * s.span()).ceil() as usize;
    let u = batch::snapshot_subspace(&s, 6 - d1, 8).unwrap();
    let uhu = u.adjoint() * &u;
    assert!((uhu - DMatrix::identity(6, 6)).norm() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = Tones::new(&mut rng, s.bandwidth, 64).sample(&s);
    let full = batch::solve_ls(&model, &batch, 0.0).unwrap().coefficients.values;
    let enc = batch::encoded_solve(&s, &model, &batch, 6 - d1, 0.0, 8).unwrap().values;
    assert!((enc - &full).norm() <= 1e-12 * full.norm().max(1.0) * 10.0);
}

#[test]
fn encoded_solve_matches_dense_objective() {
    let s = scenario(8, 8, 35.0);
    let (_, model) = scenario_model(&s, 1e-4, 8, None).unwrap();
    let u = batch::snapshot_subspace(&s, 2, 8).unwrap();
    let d1 = u.ncols();
    let delta = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = Tones::new(&mut rng, s.bandwidth, 64).sample(&s);
    let got = batch::EncodedSolver::new(&model, u.clone(), delta).unwrap().solve(&batch).unwrap();

    let mut phi = DMatrix::zeros(8 * d1, 64);
    for n in 0..8 {
        phi.view_mut((n * d1, n * 8), (d1, 8)).copy_from(&u.adjoint());
    }
    let pa = &phi * &model.stacked_matrix;
    let d = model.dimension();
    let lhs = pa.adjoint() * &pa + DMatrix::from_diagonal_element(d, d, C::new(delta, 0.0));
    let want = lhs.try_inverse().unwrap() * pa.adjoint() * (&phi * batch.stacked());
    assert!((got - &want).norm() <= 1e-10 * want.norm());
}

#[test]
fn encoded_error_falls_with_snapshot_margin() {
    let g = ArrayGeometry::ula(64, 20e9).unwrap();
    let s = ArrayScenario::<f64>::new(g, 5e9, ArrivalAngle::new(0.0, 0.0), 32).unwrap();
    let (_, model) = scenario_model(&s, 1e-8, 16, None).unwrap();
    let ls = LeastSquares::new(&model, 0.0, "").unwrap();
    let margins: Vec<usize> = (0..=10).collect();
    let solvers: Vec<_> = margins
        .iter()
        .map(|&l1| batch::EncodedSolver::new(&model, batch::snapshot_subspace(&s, l1, 16).unwrap(), 0.0).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut errs = vec![0.0; margins.len()];
    let trials = 5;
    for _ in 0..trials {
        let batch = Tones::new(&mut rng, s.bandwidth, 256).sample(&s);
        let full = ls.apply(&batch.stacked()).unwrap();
        for (e, solver) in errs.iter_mut().zip(&solvers) {
            *e += (solver.solve(&batch).unwrap() - &full).norm() / full.norm() / trials as f64;
        }
    }
    // Past 1e-12 the difference is rounding.
    for w in errs.windows(2).filter(|w| w[1] > 1e-12) {
        assert!(w[1] < w[0], "{errs:?}");
    }
    assert!(errs.iter().any(|&e| e <= 1e-3), "{errs:?}");
}

#[test]
fn encoding_rejects_oversized_subspace() {
    let s = scenario(4, 4, 90.0 - 1e-9);
    match batch::snapshot_subspace(&s, 5, 8) {
        Err(slepbeam::Error::InsufficientElements { needed, available }) => {
            assert!(needed > available);
        }
        other => panic!("expected insufficient elements, got {other:?}"),
    }
}

#[test]
fn broadside_delay_and_sum_is_coherent_average() {
    let g = ArrayGeometry::upa(3, 3, 10e9).unwrap();
    let s = ArrayScenario::new(g, 1e9, ArrivalAngle::new(0.2, std::f64::consts::FRAC_PI_2), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = DMatrix::from_fn(9, 12, |_, _| cnormal(&mut rng, 1.0));
    let b = SnapshotBatch::new(y.clone(), s.plan.snapshot_times.clone()).unwrap();
    let tau = s.delays();
    for &r in &[1usize, 4, 17] {
        let out = batch::delay_and_sum(&b, &s, r).unwrap();
        for n in 0..12 {
            let mut want = C::new(0.0, 0.0);
            for m in 0..9 {
                want += y[(m, n)] * C::from_polar(1.0, 2.0 * std::f64::consts::PI * 10e9 * tau[m]);
            }
            want /= 9.0;
            assert!((out[n] - want).norm() < 1e-12);
        }
    }
}

#[test]
fn long_filters_match_fourier_domain_delay() {
    // Oracle: interpolate each zero-padded stream through its DTFT,
    // integrated with Gauss-Legendre quadrature over one period.
    let s = scenario(4, 10, 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y = DMatrix::from_fn(4, 10, |_, _| cnormal(&mut rng, 1.0));
    let b = SnapshotBatch::new(y.clone(), s.plan.snapshot_times.clone()).unwrap();
    let out = batch::delay_and_sum(&b, &s, 80).unwrap();
    let tau = s.delays();
    let ts = s.sample_interval();
    let (x, w) = slepian::gauss_legendre(400);
    for n in 0..10 {
        let mut want = C::new(0.0, 0.0);
        for m in 0..4 {
            let pos = n as f64 + tau[m] / ts;
            let mut acc = C::new(0.0, 0.0);
            for (xi, wi) in x.iter().zip(&w) {
                let f = xi / 2.0;
                let spectrum: C<f64> = (0..10).map(|j| y[(m, j)] * C::from_polar(1.0, -2.0 * std::f64::consts::PI * f * j as f64)).sum();
                acc += spectrum * C::from_polar(1.0, 2.0 * std::f64::consts::PI * f * pos) * (wi / 2.0);
            }
            want += acc * C::from_polar(1.0, 2.0 * std::f64::consts::PI * s.geometry.carrier * tau[m]);
        }
        want /= 4.0;
        assert!((out[n] - want).norm() < 1e-4, "n={n}: {} vs {}", out[n], want);
    }
}

#[test]
fn synthesis_composes_with_solve() {
    let s = scenario(5, 7, 25.0);
    let (basis, model) = scenario_model(&s, 1e-4, 8, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = Tones::new(&mut rng, s.bandwidth, 32).sample(&s);
    let ls = LeastSquares::new(&model, 0.0, batch::basis_id(&basis)).unwrap();
    let alpha = ls.solve(&model, &b).unwrap().coefficients;
    assert!(alpha.basis_ref.starts_with("slepian("));
    let out = batch::synthesize_samples(&basis, &alpha.values, model.output_offsets.as_slice()).unwrap();
    let psi = build_synthesis(&basis, model.output_offsets.as_slice(), model.dimension()).unwrap();
    let w = ls.composite_weights(&psi);
    assert!((w * b.stacked() - out).norm() < 1e-12 * (1.0 + alpha.values.norm()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solve_is_linear_and_phase_equivariant(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, gamma in -3.0f64..3.0) {
        let s = scenario(4, 6, 30.0);
        let (_, model) = scenario_model(&s, 1e-4, 8, None).unwrap();
        let ls = LeastSquares::new(&model, 0.0, "").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y1 = DVector::from_fn(model.rows(), |_, _| cnormal(&mut rng, 1.0));
        let y2 = DVector::from_fn(model.rows(), |_, _| cnormal(&mut rng, 1.0));
        let (ca, cb) = (C::new(a, 0.0), C::new(b, 0.0));
        let lhs = ls.apply(&(&y1 * ca + &y2 * cb)).unwrap();
        let rhs = ls.apply(&y1).unwrap() * ca + ls.apply(&y2).unwrap() * cb;
        prop_assert!((lhs - &rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
        let rot = C::from_polar(1.0, gamma);
        let turned = ls.apply(&(&y1 * rot)).unwrap();
        prop_assert!((turned - ls.apply(&y1).unwrap() * rot).norm() <= 1e-12 * (1.0 + y1.norm()));
    }
}
