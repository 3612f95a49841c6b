use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use slepbeam::adaptive::null_projector;
use slepbeam::array::{ArrayGeometry, ArrayScenario, ArrivalAngle};
use slepbeam::batch::{delay_and_sum, regularized_pinv};
use slepbeam::diagnostics::{self, ExactModel, SNR_CAP_DB};
use slepbeam::scenario::{self, complex_normal, trial_rng, Generator, TestSignal};
use slepbeam::slepian;
use slepbeam::C;

fn ula(m: usize, az_deg: f64, n: usize) -> ArrayScenario<f64> {
    let g = ArrayGeometry::ula(m, 20e9).unwrap();
    ArrayScenario::new(g, 5e9, ArrivalAngle::from_degrees(az_deg, 0.0), n).unwrap()
}

fn base_dim(s: &ArrayScenario<f64>, l: usize) -> usize {
    (2.0 * s.bandwidth * s.span()).ceil() as usize + l + s.snapshot_count() - 1
}

/// Coefficients of a unit-power flat-spectrum signal over every kept function.
fn draw_coefficients<R: Rng>(rng: &mut R, em: &ExactModel<f64>, bandwidth: f64) -> DVector<C<f64>> {
    let mass = 2.0 * bandwidth * em.interval_length;
    DVector::from_fn(em.kept(), |k, _| complex_normal(rng, em.eigenvalues[k] / mass))
}

#[test]
fn full_tail_truncation_is_zero() {
    let lam = slepian::eigenvalues::<f64>(5.0).unwrap();
    assert_eq!(diagnostics::truncation_bias(&lam, lam.len()).unwrap(), 0.0);
    assert!(diagnostics::truncation_bias(&lam, lam.len() + 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn truncation_at_selected_dimension_is_within_tolerance(c in 0.2f64..60.0, e in 3.0f64..10.0) {
        let eps = 10f64.powf(-e);
        let lam = slepian::eigenvalues::<f64>(c).unwrap();
        let d = slepian::dimension_from_eigenvalues(&lam, eps);
        let normalized = diagnostics::truncation_bias(&lam, d).unwrap() / (2.0 * c);
        prop_assert!(normalized <= eps * (1.0 + 1e-12));
    }
}

#[test]
fn full_kept_dimension_has_negligible_mismatch() {
    let s = ula(8, 30.0, 8);
    let em = ExactModel::new(&s, 16).unwrap();
    let b = em.budget(s.bandwidth, em.kept()).unwrap();
    assert!(b.mismatch_bias <= 1e-12, "mismatch {:e}", b.mismatch_bias);
    assert!(b.truncation_bias <= 1e-13);
}

const REFERENCE_TRUNCATION: [f64; 5] = [0.0021, 1.99e-4, 8.04e-6, 2.09e-7, 3.96e-9];
const REFERENCE_MISMATCH: [f64; 5] = [0.0012, 2.16e-6, 2.13e-8, 2.92e-10, 4.27e-12];
const REFERENCE_TRACE: [f64; 5] = [0.037, 0.042, 0.046, 0.05, 0.053];

fn long_ula_endfire() -> (ArrayScenario<f64>, ExactModel<f64>) {
    let s = ula(64, 0.0, 32);
    let em = ExactModel::new(&s, 16).unwrap();
    (s, em)
}

#[test]
fn long_array_budget_trends() {
    let (s, em) = long_ula_endfire();
    let rows: Vec<_> = [0, 2, 4, 6, 8].iter().map(|&l| em.budget(s.bandwidth, base_dim(&s, l)).unwrap()).collect();
    for w in rows.windows(2) {
        assert!(w[1].truncation_bias < w[0].truncation_bias);
        assert!(w[1].mismatch_bias < w[0].mismatch_bias);
        assert!(w[1].variance_multiplier > w[0].variance_multiplier);
    }
    for (r, want) in rows.iter().zip(REFERENCE_TRACE) {
        let ratio = r.variance_multiplier / want;
        assert!((1.0 / 3.0..=3.0).contains(&ratio), "trace {} vs {want}", r.variance_multiplier);
        assert!((r.variance_multiplier / want - 1.0).abs() < 0.05);
    }
}

#[test]
fn long_array_truncation_matches_reference_order() {
    let (s, em) = long_ula_endfire();
    let b = em.budget(s.bandwidth, base_dim(&s, 2)).unwrap();
    let ratio = b.normalized_truncation() / REFERENCE_TRUNCATION[1];
    assert!((0.1..=10.0).contains(&ratio), "L = 2 truncation {:e}", b.normalized_truncation());
}

#[test]
fn long_array_mismatch_matches_reference_order() {
    let (s, em) = long_ula_endfire();
    let b = em.budget(s.bandwidth, base_dim(&s, 2)).unwrap();
    let ratio = b.normalized_mismatch() / REFERENCE_MISMATCH[1];
    assert!((0.1..=10.0).contains(&ratio), "L = 2 mismatch {:e} vs {:e}", b.normalized_mismatch(), REFERENCE_MISMATCH[1]);
}

#[test]
fn long_array_truncation_within_factor_three() {
    let (s, em) = long_ula_endfire();
    for (i, l) in [0, 2, 4, 6, 8].into_iter().enumerate() {
        let b = em.budget(s.bandwidth, base_dim(&s, l)).unwrap();
        let ratio = b.normalized_truncation() / REFERENCE_TRUNCATION[i];
        assert!((1.0 / 3.0..=3.0).contains(&ratio), "L = {l}: {:e} vs {:e}", b.normalized_truncation(), REFERENCE_TRUNCATION[i]);
    }
}

#[test]
fn mismatch_matches_monte_carlo_leakage() {
    let s = ula(8, 25.0, 12);
    let em = ExactModel::new(&s, 16).unwrap();
    let d = base_dim(&s, 0);
    let budget = em.budget(s.bandwidth, d).unwrap();
    let full = em.model_matrix(em.kept());
    let (pinv, _) = regularized_pinv(&em.model_matrix(d), 0.0).unwrap();
    let tail = full.columns(d, em.kept() - d).into_owned();
    let leak = &pinv * &tail;
    let mut rng = trial_rng(100, 0);
    let trials = 500;
    let mut acc = 0.0;
    for _ in 0..trials {
        let beta = draw_coefficients(&mut rng, &em, s.bandwidth);
        let bt = beta.rows(d, em.kept() - d).into_owned();
        acc += (&leak * bt).norm_squared();
    }
    let mc = acc / trials as f64;
    assert!((mc / budget.mismatch_bias - 1.0).abs() < 0.1, "MC {mc:e} vs trace {:e}", budget.mismatch_bias);
}

#[test]
fn total_error_matches_budget() {
    let s = ula(16, 0.0, 16);
    let em = ExactModel::new(&s, 16).unwrap();
    let d = base_dim(&s, 1);
    let noise = 1e-2;
    let budget = em.budget(s.bandwidth, d).unwrap();
    let full = em.model_matrix(em.kept());
    let (pinv, _) = regularized_pinv(&em.model_matrix(d), 0.0).unwrap();
    let trials = 500;
    let mut acc = 0.0;
    for t in 0..trials {
        let mut rng = trial_rng(7, t);
        let beta = draw_coefficients(&mut rng, &em, s.bandwidth);
        let mut y = &full * &beta;
        y.iter_mut().for_each(|v| *v += complex_normal(&mut rng, noise));
        let est = &pinv * y;
        acc += (est - beta.rows(0, d)).norm_squared() + beta.rows(d, em.kept() - d).norm_squared();
    }
    let mc = acc / trials as f64;
    let predicted = budget.predicted_mse(noise);
    assert!((mc / predicted - 1.0).abs() < 0.1, "MC {mc:e} vs {predicted:e} ({budget:?})");
}

#[test]
fn nulling_bias_vanishes_without_interferer() {
    let s = ula(8, 30.0, 8);
    let em = ExactModel::new(&s, 16).unwrap();
    let a = em.model_matrix(base_dim(&s, 2));
    let zero = DMatrix::zeros(a.nrows(), a.nrows());
    assert_eq!(diagnostics::nulling_bias(&a, &zero, &em.eigenvalues).unwrap(), 0.0);
}

fn interferer_matrix(s: &ArrayScenario<f64>, az_deg: f64) -> DMatrix<C<f64>> {
    let si = s.with_angle(ArrivalAngle::from_degrees(az_deg, 0.0));
    let em = ExactModel::new(&si, 16).unwrap();
    em.model_matrix(base_dim(&si, 2))
}

#[test]
fn nulling_bias_grows_as_interferer_approaches() {
    let s = ula(16, 60.0, 16);
    let em = ExactModel::new(&s, 16).unwrap();
    let a = em.model_matrix(base_dim(&s, 2));
    let biases: Vec<f64> = [110.0, 85.0, 72.0, 66.0]
        .iter()
        .map(|&az| {
            let p = null_projector(&interferer_matrix(&s, az)).unwrap().interferer_projection();
            diagnostics::nulling_bias(&a, &p, &em.eigenvalues).unwrap()
        })
        .collect();
    for w in biases.windows(2) {
        assert!(w[1] > w[0], "{biases:?}");
    }
}

#[test]
fn nulling_bias_matches_monte_carlo() {
    let s = ula(16, 60.0, 16);
    let em = ExactModel::new(&s, 16).unwrap();
    let d = base_dim(&s, 2);
    let a = em.model_matrix(d);
    let proj = null_projector(&interferer_matrix(&s, 75.0)).unwrap();
    let p = proj.interferer_projection();
    let trace = diagnostics::nulling_bias(&a, &p, &em.eigenvalues).unwrap();
    let (pinv, _) = regularized_pinv(&a, 0.0).unwrap();
    let z = &pinv * &p * &a;
    let mut rng = trial_rng(31, 0);
    let trials = 500;
    let mut acc = 0.0;
    for _ in 0..trials {
        let alpha = DVector::from_fn(d, |k, _| complex_normal(&mut rng, em.eigenvalues[k]));
        // Nulled estimate of in-model data and its error.
        let est = &pinv * proj.apply(&(&a * &alpha));
        let err = &alpha - &est;
        assert!((&err - &z * &alpha).norm() <= 1e-8 * alpha.norm());
        acc += err.norm_squared();
    }
    let mc = acc / trials as f64;
    assert!((mc / trace - 1.0).abs() < 0.1, "MC {mc:e} vs {trace:e}");
}

#[test]
fn snr_definition_checks() {
    let truth = DVector::from_fn(10, |i, _| C::new(i as f64 + 1.0, -0.5));
    assert_eq!(diagnostics::beamformed_snr(&truth, &truth).unwrap(), SNR_CAP_DB);
    let zero = DVector::zeros(10);
    assert!(diagnostics::beamformed_snr(&zero, &truth).unwrap().abs() < 1e-12);
    assert!(diagnostics::beamformed_snr(&truth, &zero).is_err());
    let half = &truth * C::new(0.5, 0.0);
    let snr = diagnostics::beamformed_snr(&half, &truth).unwrap();
    assert!((snr - 10.0 * 4f64.log10()).abs() < 1e-12);
    assert_eq!(diagnostics::array_gain(10.0, 27.5), 17.5);
}

#[test]
fn delay_and_sum_reaches_ideal_gain_with_integer_delays() {
    let m = 16;
    let s = ula(m, 90.0, 64);
    let nominal = 10.0;
    let noise = scenario::db_to_power(-nominal);
    let gains: Vec<f64> = (0..50)
        .map(|t| {
            let sig = TestSignal::for_scenario(Generator::SumOfSinusoids, &s, 500 + t).unwrap();
            let mut rng = trial_rng(900, t);
            let batch = scenario::sample_array(&sig, &s, noise, &[], &mut rng).unwrap();
            let est = delay_and_sum(&batch, &s, 8).unwrap();
            let truth = scenario::truth(&sig, &s).unwrap();
            diagnostics::array_gain(nominal, diagnostics::beamformed_snr(&est, &truth).unwrap())
        })
        .collect();
    let (mean, _) = diagnostics::mean_std(&gains);
    assert!((mean - diagnostics::ideal_gain(m)).abs() < 0.5, "gain {mean}");
}
