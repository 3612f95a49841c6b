use nalgebra::DMatrix;
use proptest::prelude::*;
use slepbeam::array::{ArrayGeometry, ArrayScenario, ArrivalAngle, Regime};
use slepbeam::config::{EncoderSpec, GeometrySpec, ScenarioConfig};
use slepbeam::scenario::{self, Generator, Interferer, TestSignal};
use slepbeam::slepian::gauss_legendre;
use slepbeam::{Error, C};
use std::f64::consts::{PI, TAU};

fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, mut k) = (1.0, 1.0, 1.0);
    while term > 1e-18 * sum {
        term *= (x / (2.0 * k)).powi(2);
        sum += term;
        k += 1.0;
    }
    sum
}

fn kaiser(n: usize, beta: f64) -> Vec<f64> {
    let norm = bessel_i0(beta);
    (0..n)
        .map(|i| {
            let r = 2.0 * i as f64 / (n - 1) as f64 - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm
        })
        .collect()
}

fn dtft(x: &[C<f64>], fs: f64, f: f64) -> f64 {
    x.iter().enumerate().map(|(i, v)| v * C::from_polar(1.0, -TAU * f * i as f64 / fs)).sum::<C<f64>>().norm()
}

#[test]
fn same_seed_same_signal() {
    let t: Vec<f64> = (0..50).map(|i| i as f64 * 3.1e-11).collect();
    for g in [Generator::SumOfSinusoids, Generator::RandomSlepian] {
        let a = TestSignal::generate(g, 5e9, 0.0, 2e-9, 42).unwrap().evaluate(&t).unwrap();
        let b = TestSignal::generate(g, 5e9, 0.0, 2e-9, 42).unwrap().evaluate(&t).unwrap();
        let c = TestSignal::generate(g, 5e9, 0.0, 2e-9, 43).unwrap().evaluate(&t).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

#[test]
fn tones_lie_in_band_with_unit_power() {
    let omega = 5e9;
    let s = TestSignal::sum_of_sinusoids(omega, 7).unwrap();
    let f = s.frequencies().unwrap();
    assert_eq!(f.len(), scenario::TONE_COUNT);
    assert!(f.iter().all(|x| x.abs() <= omega));
    // Long-run average power of a sum of distinct tones is the sum of |a|².
    let t: Vec<f64> = (0..20000).map(|i| i as f64 * 0.37 / omega).collect();
    let p: f64 = s.evaluate(&t).unwrap().iter().map(|v| v.norm_sqr()).sum::<f64>() / t.len() as f64;
    assert!((p - 1.0).abs() < 0.05, "power {p}");
}

#[test]
fn dense_spectrum_is_confined_to_band() {
    let omega = 1.0;
    let fs = 8.0 * omega;
    let n = 4096;
    let s = TestSignal::sum_of_sinusoids(omega, 3).unwrap();
    let t: Vec<f64> = (0..n).map(|i| i as f64 / fs).collect();
    let w = kaiser(n, 14.5);
    let x: Vec<C<f64>> = s.evaluate(&t).unwrap().iter().zip(&w).map(|(v, w)| v * *w).collect();
    let peak = (0..400).map(|i| dtft(&x, fs, -omega + 2.0 * omega * i as f64 / 399.0)).fold(0.0, f64::max);
    // Kaiser main lobe is ~5 bins of fs/n; stay 50 bins clear of the band edge.
    let guard = 50.0 * fs / n as f64;
    let mut worst: f64 = 0.0;
    for i in 0..300 {
        let f = omega + guard + (fs - 2.0 * omega - 2.0 * guard) * i as f64 / 299.0;
        worst = worst.max(dtft(&x, fs, f));
    }
    let rejection = 20.0 * (peak / worst).log10();
    assert!(rejection >= 120.0, "rejection {rejection:.1} dB");
}

#[test]
fn slepian_energy_matches_quadrature() {
    let (omega, start, len) = (1.0, -3.0, 10.0);
    let s = TestSignal::random_slepian(omega, start, len, 11).unwrap();
    let (x, w) = gauss_legendre(400);
    let t: Vec<f64> = x.iter().map(|u| start + (u + 1.0) * len / 2.0).collect();
    let v = s.evaluate(&t).unwrap();
    let integral: f64 = v.iter().zip(&w).map(|(v, w)| v.norm_sqr() * w * len / 2.0).sum();
    let e = s.energy().unwrap();
    assert!((2.0 * omega * integral - e).abs() < 1e-8 * e, "{} vs {e}", 2.0 * omega * integral);
}

#[test]
fn slepian_mean_energy_is_time_bandwidth() {
    let (omega, len) = (2.0, 5.0);
    let draws = 200;
    let mean: f64 = (0..draws)
        .map(|k| TestSignal::random_slepian(omega, 0.0, len, 1000 + k).unwrap().energy().unwrap())
        .sum::<f64>()
        / draws as f64;
    let target = 2.0 * omega * len;
    assert!((mean / target - 1.0).abs() < 0.05, "mean energy {mean} vs {target}");
}

#[test]
fn slepian_signal_rejects_times_outside_support() {
    let s = TestSignal::random_slepian(1.0, 0.0, 4.0, 1).unwrap();
    assert!(s.at(2.0).is_ok());
    assert!(s.at(4.5).is_err());
}

fn ula_scenario(m: usize, az_deg: f64, n: usize) -> ArrayScenario<f64> {
    let g = ArrayGeometry::ula(m, 20e9).unwrap();
    ArrayScenario::new(g, 5e9, ArrivalAngle::from_degrees(az_deg, 0.0), n).unwrap()
}

#[test]
fn broadside_rows_are_identical() {
    let s = ula_scenario(8, 90.0, 16);
    let sig = TestSignal::for_scenario(Generator::SumOfSinusoids, &s, 5).unwrap();
    let mut rng = scenario::trial_rng(5, 0);
    let b = scenario::sample_array(&sig, &s, 0.0, &[], &mut rng).unwrap();
    for m in 1..8 {
        assert!((b.samples.row(m) - b.samples.row(0)).camax() < 1e-12);
    }
}

#[test]
fn zero_delay_sample_equals_signal() {
    let g = ArrayGeometry::<f64>::new(vec![[0.0; 3]], 20e9).unwrap();
    let s = ArrayScenario::new(g, 5e9, ArrivalAngle::from_degrees(30.0, 20.0), 24).unwrap();
    for gen in [Generator::SumOfSinusoids, Generator::RandomSlepian] {
        let sig = TestSignal::for_scenario(gen, &s, 9).unwrap();
        let b = scenario::sample_array(&sig, &s, 0.0, &[], &mut scenario::trial_rng(9, 0)).unwrap();
        let truth = scenario::truth(&sig, &s).unwrap();
        assert_eq!(b.samples.row(0).transpose(), truth);
    }
}

#[test]
fn samples_follow_observation_model() {
    let s = ula_scenario(6, 35.0, 10);
    let sig = TestSignal::for_scenario(Generator::RandomSlepian, &s, 2).unwrap();
    let b = scenario::sample_array(&sig, &s, 0.0, &[], &mut scenario::trial_rng(2, 0)).unwrap();
    let tau = s.delays();
    for m in 0..6 {
        for n in 0..10 {
            let t = s.plan.snapshot_times[n];
            let want = C::from_polar(1.0, -TAU * 20e9 * tau[m]) * sig.at(t - tau[m]).unwrap();
            assert!((b.samples[(m, n)] - want).norm() < 1e-12);
        }
    }
}

#[test]
fn small_planar_array_is_narrowband() {
    let g = ArrayGeometry::<f64>::upa(4, 4, 5e9).unwrap();
    let s = ArrayScenario::new(g, 10e6, ArrivalAngle::from_degrees(30.0, 10.0), 8).unwrap();
    let t1 = s.span();
    let ts = s.sample_interval();
    assert!((ts - 50e-9).abs() < 1e-15);
    assert!(t1 > 0.3e-9 && t1 < 0.5e-9, "T_1 = {t1:e}");
    assert!(t1 < 1e-2 * ts);
    assert_eq!(s.regime().0, Regime::Narrowband);
}

#[test]
fn interferer_power_matches_sir() {
    let s = ula_scenario(4, 20.0, 1 << 16);
    let sig = TestSignal::for_scenario(Generator::SumOfSinusoids, &s, 1).unwrap();
    let jam = TestSignal::for_scenario(Generator::SumOfSinusoids, &s, 2).unwrap();
    let angle = ArrivalAngle::from_degrees(70.0, 0.0);
    let only_sig = scenario::source_samples(&sig, &s, &s.angle).unwrap();
    for sir in [-30.0, -10.0, 5.0] {
        let jam = jam.clone();
        let with_jam = scenario::sample_array(
            &sig,
            &s,
            0.0,
            &[Interferer { angle, sir_db: sir, signal: jam }],
            &mut scenario::trial_rng(0, 0),
        )
        .unwrap();
        let jam_part = &with_jam.samples - &only_sig;
        let ratio = only_sig.norm_squared() / jam_part.norm_squared();
        let measured = 10.0 * ratio.log10();
        assert!((measured - sir).abs() < 0.1, "SIR {sir}: measured {measured:.3}");
    }
}

#[test]
fn noise_covariance_is_white() {
    let (m, samples, power) = (6, 1000, 0.3);
    let mut rng = scenario::trial_rng(77, 0);
    let x: DMatrix<C<f64>> = scenario::noise_batch(&mut rng, m, samples, power);
    let r = &x * x.adjoint() / C::new(samples as f64, 0.0);
    for i in 0..m {
        assert!((r[(i, i)].re / power - 1.0).abs() < 0.1);
        for j in 0..m {
            if i != j {
                assert!(r[(i, j)].norm() / power < 0.1);
            }
        }
    }
    let eye = DMatrix::<C<f64>>::identity(m, m) * C::new(power, 0.0);
    assert!((r - &eye).norm() / eye.norm() < 0.05 * 2.0_f64.sqrt() * 1.5);
}

#[test]
fn noise_power_is_calibrated() {
    let mut rng = scenario::trial_rng(3, 0);
    let x = scenario::noise_batch(&mut rng, 64, 4000, 0.01);
    let p = x.norm_squared() / x.len() as f64;
    assert!((p / 0.01 - 1.0).abs() < 0.05);
}

#[test]
fn trial_streams_differ_and_repeat() {
    use rand::Rng;
    let a: u64 = scenario::trial_rng(10, 3).random();
    let b: u64 = scenario::trial_rng(10, 3).random();
    let c: u64 = scenario::trial_rng(10, 4).random();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn config_parses_known_keys() {
    let text = "# scenario\ngeometry = upa:4x4\ncarrier_hz = 5e9\nbandwidth_hz = 1e7\nsnr_db = 0, 10,20\n\
                interferers = 40:0:-30, -20:5:-10\nencoder = subarray:2x2\nsignal = slepian\ntrials = 7 # short\n";
    let c = ScenarioConfig::parse(text).unwrap();
    assert_eq!(c.geometry, GeometrySpec::Upa(4, 4));
    assert_eq!(c.snr_db, vec![0.0, 10.0, 20.0]);
    assert_eq!(c.interferers.len(), 2);
    assert_eq!(c.interferers[1].sir_db, -10.0);
    assert_eq!(c.encoder, EncoderSpec::Subarray(2, 2));
    assert_eq!(c.signal, Generator::RandomSlepian);
    assert_eq!(c.trials, 7);
    assert_eq!(c.scenario().unwrap().element_count(), 16);
}

#[test]
fn config_rejects_unknown_and_bad_values() {
    for text in [
        "colour = blue\n",
        "geometry = ring:8\n",
        "bandwidth_hz = -1\n",
        "trials = 0\n",
        "snr_db = 1, x\n",
        "trials = 3\ntrials = 4\n",
        "methods = ls, magic\n",
        "just a line\n",
    ] {
        assert!(matches!(ScenarioConfig::parse(text), Err(Error::Config(_))), "{text:?}");
    }
}

#[test]
fn config_errors_map_to_exit_code_two() {
    let e = ScenarioConfig::parse("nope = 1").unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tone_frequencies_stay_in_band(omega in 1e3f64..1e10, seed in any::<u64>()) {
        let s = TestSignal::sum_of_sinusoids(omega, seed).unwrap();
        prop_assert!(s.frequencies().unwrap().iter().all(|f| f.abs() <= omega));
    }

    #[test]
    fn tone_amplitudes_have_unit_total_power(seed in any::<u64>()) {
        let s = TestSignal::sum_of_sinusoids(1.0, seed).unwrap();
        // At t = 0 every tone is at phase zero; total power is encoded in the long-run mean.
        let t: Vec<f64> = (0..4000).map(|i| i as f64 * 13.7).collect();
        let p: f64 = s.evaluate(&t).unwrap().iter().map(|v| v.norm_sqr()).sum::<f64>() / t.len() as f64;
        prop_assert!((p - 1.0).abs() < 0.15);
    }

    #[test]
    fn broadside_planar_rows_match(seed in 0u64..1000, mx in 1usize..5, my in 1usize..5) {
        let g = ArrayGeometry::<f64>::upa(mx, my, 3e9).unwrap();
        let s = ArrayScenario::new(g, 1e9, ArrivalAngle::new(0.0, PI / 2.0), 6).unwrap();
        let sig = TestSignal::for_scenario(Generator::SumOfSinusoids, &s, seed).unwrap();
        let b = scenario::sample_array(&sig, &s, 0.0, &[], &mut scenario::trial_rng(seed, 0)).unwrap();
        for m in 1..mx * my {
            prop_assert!((b.samples.row(m) - b.samples.row(0)).camax() < 1e-12);
        }
    }
}
