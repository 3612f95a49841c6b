//! Measurement operator from Slepian coefficients to array samples.
//!
//! Columns are scaled by `√T` so that each one has unit RMS over the basis
//! interval; coefficients are therefore in signal-amplitude units.

use nalgebra::{ComplexField, DMatrix, DVector};

use crate::array::ArrayScenario;
use crate::error::{Error, Result};
use crate::scalar::{cis, cre, Real, C};
use crate::slepian::SlepianBasis;

/// Stacked measurement matrix `A(θ)` (rows `ℓ = n·M + m`) and its sampling data.
#[derive(Clone, Debug)]
pub struct ForwardModel<T: Real> {
    pub stacked_matrix: DMatrix<C<T>>,
    /// `t_n - τ_m(θ)` shifted into the basis interval, snapshot-major.
    pub sample_offsets: DVector<T>,
    /// `e^{-j2πf_c τ_m(θ)}` for every row.
    pub carrier_phases: DVector<C<T>>,
    /// Snapshot times `t_n` in basis coordinates.
    pub output_offsets: DVector<T>,
    pub element_count: usize,
    pub snapshot_count: usize,
}

/// Sinc kernel Gram `B(θ)` of a set of sample offsets.
#[derive(Clone, Debug)]
pub struct KernelGram<T: Real> {
    pub gram: DMatrix<T>,
}

/// Basis interval `[0, T_N(θ)]` for a scenario; degenerate spans are widened to
/// one sample interval on each side of the single sample time.
pub fn scenario_interval<T: Real>(scenario: &ArrayScenario<T>) -> (T, T) {
    let tn = scenario.batch_span();
    if (scenario.bandwidth * tn).as_f64() <= 1e-12 {
        let ts = scenario.sample_interval();
        (T::lit(2.0) * ts, ts - tn / T::lit(2.0))
    } else {
        (tn, T::zero())
    }
}

/// Slepian basis covering the batch of `scenario`.
pub fn scenario_basis<T: Real>(scenario: &ArrayScenario<T>, tolerance: T, grid_density: usize) -> Result<SlepianBasis<T>> {
    let (len, _) = scenario_interval(scenario);
    SlepianBasis::build(scenario.bandwidth, len, tolerance, grid_density)
}

/// Basis, forward model and default dimension `D_N(θ)` in one call.
pub fn scenario_model<T: Real>(
    scenario: &ArrayScenario<T>,
    tolerance: T,
    grid_density: usize,
    dimension: Option<usize>,
) -> Result<(SlepianBasis<T>, ForwardModel<T>)> {
    let basis = scenario_basis(scenario, tolerance, grid_density)?;
    let d = match dimension {
        Some(d) => d,
        None => scenario.representation_dim(tolerance)?,
    };
    let model = build_forward(scenario, &basis, d)?;
    Ok((basis, model))
}

/// How basis functions are evaluated at off-grid times.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Evaluation {
    /// Local interpolation of the stored grid samples.
    Interpolated,
    /// Direct evaluation of the continuous eigenfunctions.
    Exact,
}

/// `√T ψ_k(t)` for the first `d` functions, as a complex matrix (times × d).
pub fn scaled_samples<T: Real>(basis: &SlepianBasis<T>, times: &[T], d: usize) -> Result<DMatrix<C<T>>> {
    scaled_samples_using(basis, times, d, Evaluation::Interpolated)
}

pub fn scaled_samples_using<T: Real>(
    basis: &SlepianBasis<T>,
    times: &[T],
    d: usize,
    how: Evaluation,
) -> Result<DMatrix<C<T>>> {
    if d == 0 || d > basis.kept() {
        return Err(Error::InvalidArgument(format!("dimension {d} must lie in 1..={}", basis.kept())));
    }
    let scale = basis.interval_length().sqrt();
    let values = match how {
        Evaluation::Interpolated => basis.evaluate_leading(d, times)?,
        Evaluation::Exact => basis.evaluate_exact(d, times)?,
    };
    Ok(values.map(|v| cre(v * scale)))
}

pub fn build_forward<T: Real>(scenario: &ArrayScenario<T>, basis: &SlepianBasis<T>, d: usize) -> Result<ForwardModel<T>> {
    build_forward_using(scenario, basis, d, Evaluation::Interpolated)
}

pub fn build_forward_using<T: Real>(
    scenario: &ArrayScenario<T>,
    basis: &SlepianBasis<T>,
    d: usize,
    how: Evaluation,
) -> Result<ForwardModel<T>> {
    let tau = scenario.delays();
    let times = &scenario.plan.snapshot_times;
    let (m, n) = (tau.len(), times.len());
    let (_, pad) = scenario_interval(scenario);
    let shift = tau.max() - times[0] + pad;
    let len = basis.interval_length();
    let slack = len * T::lit(1e-12);

    let mut offsets = DVector::zeros(m * n);
    let mut phases = DVector::from_element(m * n, C::new(T::one(), T::zero()));
    let mut bad = Vec::new();
    let two_pi_fc = T::two_pi() * scenario.geometry.carrier;
    for k in 0..n {
        for e in 0..m {
            let l = k * m + e;
            let off = times[k] - tau[e] + shift;
            if !(off >= -slack && off <= len + slack) {
                bad.push((e, k));
            }
            offsets[l] = off.max(T::zero()).min(len);
            phases[l] = cis(-two_pi_fc * tau[e]);
        }
    }
    if !bad.is_empty() {
        return Err(Error::OffsetsOutOfInterval(bad));
    }
    let mut stacked = scaled_samples_using(basis, offsets.as_slice(), d, how)?;
    for (l, mut row) in stacked.row_iter_mut().enumerate() {
        row *= phases[l];
    }
    let output_offsets = times.map(|t| {
        let o = t + shift;
        if o >= -slack && o <= len + slack {
            o.max(T::zero()).min(len)
        } else {
            o
        }
    });
    Ok(ForwardModel {
        stacked_matrix: stacked,
        sample_offsets: offsets,
        carrier_phases: phases,
        output_offsets,
        element_count: m,
        snapshot_count: n,
    })
}

impl<T: Real> ForwardModel<T> {
    pub fn dimension(&self) -> usize {
        self.stacked_matrix.ncols()
    }

    pub fn rows(&self) -> usize {
        self.stacked_matrix.nrows()
    }

    /// `A_n(θ)`, the `M × D` block of snapshot `n`.
    pub fn per_snapshot(&self, n: usize) -> DMatrix<C<T>> {
        self.stacked_matrix.rows(n * self.element_count, self.element_count).into_owned()
    }

    pub fn singular_values(&self) -> DVector<T> {
        self.stacked_matrix.clone().singular_values()
    }

    pub fn condition_number(&self) -> T {
        let s = self.singular_values();
        let lo = s.min();
        if lo > T::zero() {
            s.max() / lo
        } else {
            T::max_value().unwrap_or(T::one() / T::TINY)
        }
    }

    /// Largest normalized inner product between two distinct columns.
    pub fn mutual_coherence(&self) -> T {
        let a = &self.stacked_matrix;
        let norms: Vec<T> = a.column_iter().map(|c| c.norm()).collect();
        let mut worst = T::zero();
        for i in 0..a.ncols() {
            for j in i + 1..a.ncols() {
                let ip = a.column(i).dotc(&a.column(j)).modulus() / (norms[i] * norms[j]);
                worst = worst.max(ip);
            }
        }
        worst
    }

    /// The Gram of the sample offsets, conjugated by the carrier phases.
    pub fn phased_kernel_gram(&self, bandwidth: T) -> DMatrix<C<T>> {
        let b = build_kernel_gram(&self.sample_offsets, bandwidth).gram;
        let p = &self.carrier_phases;
        DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| p[i] * p[j].conj() * b[(i, j)])
    }
}

/// `B[ℓ, ℓ'] = sin(2πΩ(τ_ℓ - τ_ℓ'))/(π(τ_ℓ - τ_ℓ'))`, with `2Ω` on the diagonal.
pub fn build_kernel_gram<T: Real>(offsets: &DVector<T>, bandwidth: T) -> KernelGram<T> {
    let n = offsets.len();
    let two_om = T::lit(2.0) * bandwidth;
    let mut gram = DMatrix::from_element(n, n, two_om);
    for i in 0..n {
        for j in 0..i {
            let v = sinc_kernel(offsets[i] - offsets[j], bandwidth);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    KernelGram { gram }
}

/// `sin(2πΩx)/(πx)`, continuous at zero.
pub fn sinc_kernel<T: Real>(x: T, bandwidth: T) -> T {
    let arg = T::two_pi() * bandwidth * x;
    if arg.abs() < T::lit(1e-8) {
        T::lit(2.0) * bandwidth * (T::one() - arg * arg / T::lit(6.0))
    } else {
        arg.sin() / (T::pi() * x)
    }
}

/// Synthesis matrix `Ψ[n, k] = √T ψ_k(t_n)` for times in basis coordinates.
pub fn build_synthesis<T: Real>(basis: &SlepianBasis<T>, output_times: &[T], d: usize) -> Result<DMatrix<C<T>>> {
    scaled_samples(basis, output_times, d)
}
