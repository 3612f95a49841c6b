//! Band-limited test signals and noisy array snapshots.
//!
//! Signals have unit average power, so a nominal SNR of `x` dB means a noise
//! power of `10^{-x/10}` per sample.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::array::{ArrayScenario, ArrivalAngle};
use crate::batch::SnapshotBatch;
use crate::error::{Error, Result};
use crate::scalar::{cis, Real, C};
use crate::slepian::SlepianBasis;

/// Number of tones in the sum-of-sinusoids generator.
pub const TONE_COUNT: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    SumOfSinusoids,
    RandomSlepian,
}

#[derive(Clone, Debug)]
enum Body {
    Tones { freqs: Vec<f64>, amps: Vec<C<f64>> },
    Slepian { basis: SlepianBasis<f64>, coefficients: Vec<C<f64>> },
}

/// Random band-limited signal with exact evaluation.
#[derive(Clone, Debug)]
pub struct TestSignal {
    pub bandwidth: f64,
    /// Start of the support for [`Generator::RandomSlepian`]; tones are defined everywhere.
    pub start: f64,
    pub duration: f64,
    pub generator: Generator,
    pub seed: u64,
    body: Body,
}

/// An interfering source: its arrival angle and power relative to the signal.
#[derive(Clone, Debug)]
pub struct Interferer {
    pub angle: ArrivalAngle<f64>,
    pub sir_db: f64,
    pub signal: TestSignal,
}

/// Deterministic per-trial generator: `seed + trial`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial))
}

/// Circular complex Gaussian sample with `E|z|² = power`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, power: f64) -> C<f64> {
    let s = (power / 2.0).sqrt();
    C::new(rng.sample::<f64, _>(StandardNormal) * s, rng.sample::<f64, _>(StandardNormal) * s)
}

pub fn db_to_power(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl TestSignal {
    /// Sum of [`TONE_COUNT`] tones, frequencies uniform in `[-Ω, Ω]`, Gaussian
    /// amplitudes rescaled to unit total power.
    pub fn sum_of_sinusoids(bandwidth: f64, seed: u64) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidArgument("signal bandwidth must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let freqs: Vec<f64> = (0..TONE_COUNT).map(|_| rng.random_range(-bandwidth..=bandwidth)).collect();
        let mut amps: Vec<C<f64>> = (0..TONE_COUNT).map(|_| complex_normal(&mut rng, 1.0)).collect();
        let total: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        let scale = total.sqrt().recip();
        amps.iter_mut().for_each(|a| *a *= scale);
        Ok(TestSignal {
            bandwidth,
            start: f64::NEG_INFINITY,
            duration: f64::INFINITY,
            generator: Generator::SumOfSinusoids,
            seed,
            body: Body::Tones { freqs, amps },
        })
    }

    /// Flat-spectrum Slepian process on `[start, start + duration]`: coefficient
    /// `k` (unit-RMS columns) is `CN(0, λ_k / (2ΩT))`, giving unit expected power.
    pub fn random_slepian(bandwidth: f64, start: f64, duration: f64, seed: u64) -> Result<Self> {
        let basis = SlepianBasis::<f64>::build(bandwidth, duration, 1e-10, 8)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = 2.0 * bandwidth * duration;
        let coefficients = basis.eigenvalues().iter().take(basis.kept()).map(|&l| complex_normal(&mut rng, l / total)).collect();
        Ok(TestSignal {
            bandwidth,
            start,
            duration,
            generator: Generator::RandomSlepian,
            seed,
            body: Body::Slepian { basis, coefficients },
        })
    }

    pub fn generate(generator: Generator, bandwidth: f64, start: f64, duration: f64, seed: u64) -> Result<Self> {
        match generator {
            Generator::SumOfSinusoids => Self::sum_of_sinusoids(bandwidth, seed),
            Generator::RandomSlepian => Self::random_slepian(bandwidth, start, duration, seed),
        }
    }

    /// Signal support needed to sample `scenario` without pre-steering.
    pub fn for_scenario(generator: Generator, scenario: &ArrayScenario<f64>, seed: u64) -> Result<Self> {
        let tau = scenario.delays();
        let t = &scenario.plan.snapshot_times;
        let start = t[0] - tau.max();
        let duration = t[t.len() - 1] - tau.min() - start;
        let duration = duration.max(1.0 / (2.0 * scenario.bandwidth));
        Self::generate(generator, scenario.bandwidth, start, duration, seed)
    }

    /// Tone frequencies, if this is a sum of sinusoids.
    pub fn frequencies(&self) -> Option<&[f64]> {
        match &self.body {
            Body::Tones { freqs, .. } => Some(freqs),
            Body::Slepian { .. } => None,
        }
    }

    /// Exact values at `times`.
    pub fn evaluate(&self, times: &[f64]) -> Result<Vec<C<f64>>> {
        match &self.body {
            Body::Tones { freqs, amps } => Ok(times
                .iter()
                .map(|&t| {
                    freqs
                        .iter()
                        .zip(amps)
                        .map(|(&f, a)| a * C::from_polar(1.0, std::f64::consts::TAU * f * t))
                        .sum()
                })
                .collect()),
            Body::Slepian { basis, coefficients } => {
                let local: Vec<f64> = times.iter().map(|t| t - self.start).collect();
                let f = basis.evaluate_exact(coefficients.len(), &local)?;
                let scale = self.duration.sqrt();
                Ok((0..times.len())
                    .map(|r| coefficients.iter().enumerate().map(|(k, c)| c * (f[(r, k)] * scale)).sum())
                    .collect())
            }
        }
    }

    pub fn at(&self, t: f64) -> Result<C<f64>> {
        Ok(self.evaluate(&[t])?[0])
    }

    /// `2Ω ∫|s|²` over the support (energy in Nyquist-sample units).
    pub fn energy(&self) -> Option<f64> {
        match &self.body {
            Body::Tones { .. } => None,
            Body::Slepian { coefficients, .. } => {
                let sum: f64 = coefficients.iter().map(|c| c.norm_sqr()).sum();
                Some(2.0 * self.bandwidth * self.duration * sum)
            }
        }
    }
}

/// Noise-free samples `e^{-j2πf_c τ_m} s(t_n - τ_m)` of one source (M × N).
pub fn source_samples(signal: &TestSignal, scenario: &ArrayScenario<f64>, angle: &ArrivalAngle<f64>) -> Result<DMatrix<C<f64>>> {
    let tau = scenario.geometry.delays(angle);
    let t = &scenario.plan.snapshot_times;
    let (m, n) = (tau.len(), t.len());
    let times: Vec<f64> = (0..n).flat_map(|k| (0..m).map(move |e| (k, e))).map(|(k, e)| t[k] - tau[e]).collect();
    let values = signal.evaluate(&times)?;
    let two_pi_fc = std::f64::consts::TAU * scenario.geometry.carrier;
    Ok(DMatrix::from_fn(m, n, |e, k| values[k * m + e] * cis(-two_pi_fc * tau[e])))
}

/// Samples the array: look-direction signal, interferers and white noise of power `noise_power`.
pub fn sample_array<R: Rng + ?Sized>(
    signal: &TestSignal,
    scenario: &ArrayScenario<f64>,
    noise_power: f64,
    interferers: &[Interferer],
    rng: &mut R,
) -> Result<SnapshotBatch<f64>> {
    let mut y = source_samples(signal, scenario, &scenario.angle)?;
    for i in interferers {
        let amp = db_to_power(-i.sir_db).sqrt();
        y += source_samples(&i.signal, scenario, &i.angle)? * C::new(amp, 0.0);
    }
    if noise_power > 0.0 {
        y.iter_mut().for_each(|v| *v += complex_normal(rng, noise_power));
    }
    SnapshotBatch::new(y, scenario.plan.snapshot_times.clone())
}

/// White noise batch of power `noise_power`.
pub fn noise_batch<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, noise_power: f64) -> DMatrix<C<f64>> {
    DMatrix::from_fn(rows, cols, |_, _| complex_normal(rng, noise_power))
}

/// Ground truth `s(t_n)` at the snapshot times.
pub fn truth(signal: &TestSignal, scenario: &ArrayScenario<f64>) -> Result<DVector<C<f64>>> {
    Ok(DVector::from_vec(signal.evaluate(scenario.plan.snapshot_times.as_slice())?))
}

/// Casts a batch to another scalar type.
pub fn cast_batch<T: Real>(b: &SnapshotBatch<f64>) -> SnapshotBatch<T> {
    SnapshotBatch {
        samples: b.samples.map(|z| C::new(T::lit(z.re), T::lit(z.im))),
        times: b.times.map(|t| T::lit(t)),
    }
}
