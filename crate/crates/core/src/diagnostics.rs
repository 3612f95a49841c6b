//! Bias/variance error budget and SNR metrics.
//!
//! The free functions use coefficients with `E|α_k|² = λ_k` against unit-norm
//! eigenfunctions. [`ErrorBudget`] rescales to a unit-power signal expressed in
//! the coefficient units of the forward model, so that
//! `E‖β̂ - β‖² = truncation + mismatch + σ² · variance_multiplier`.

use nalgebra::{ComplexField, DMatrix, DVector};

use crate::array::ArrayScenario;
use crate::batch::regularized_pinv;
use crate::error::{Error, Result};
use crate::forward::{build_forward_using, scenario_basis, scenario_interval, Evaluation};
use crate::scalar::{cre, Real, C};

/// Sentinel returned for an error-free estimate.
pub const SNR_CAP_DB: f64 = 300.0;

/// Basis tolerance used when a computation needs eigenpairs far into the tail.
pub const TAIL_TOLERANCE: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorBudget<T: Real> {
    pub truncation_bias: T,
    pub mismatch_bias: T,
    /// `trace((A^H A)^{-1})` for unit-RMS columns.
    pub variance_multiplier: T,
    pub nulling_bias: Option<T>,
    /// `ΩT_N` of the basis interval.
    pub time_bandwidth: T,
    pub dimension: usize,
}

impl<T: Real> ErrorBudget<T> {
    /// Expected coefficient error at noise power `σ²`.
    pub fn predicted_mse(&self, noise_power: T) -> T {
        self.truncation_bias + self.mismatch_bias + noise_power * self.variance_multiplier + self.nulling_bias.unwrap_or(T::zero())
    }

    /// Biases with `E|α_k|² = λ_k`, divided by `ΩT_N` (tabulated form).
    pub fn normalized_truncation(&self) -> T {
        self.truncation_bias * T::lit(2.0)
    }

    pub fn normalized_mismatch(&self) -> T {
        self.mismatch_bias * T::lit(2.0)
    }
}

/// `Σ_{k > d} λ_k`.
pub fn truncation_bias<T: Real>(eigenvalues: &DVector<T>, d: usize) -> Result<T> {
    if d > eigenvalues.len() {
        return Err(Error::InvalidArgument(format!("dimension {d} exceeds the {} available eigenvalues", eigenvalues.len())));
    }
    // Sum from the small end for accuracy.
    Ok(eigenvalues.iter().skip(d).rev().fold(T::zero(), |acc, &l| acc + l))
}

/// `trace(A^† (B - Σ_{k≤d} λ_k a_k a_k^H) A^{†H})`.
///
/// `functions` holds the phased samples `a_k` of every kept unit-norm
/// eigenfunction; its first `d` columns form `A`. The tail is summed term by
/// term and the kernel remainder beyond the kept functions added separately,
/// which avoids cancelling two large traces.
pub fn mismatch_bias<T: Real>(functions: &DMatrix<C<T>>, gram: &DMatrix<C<T>>, eigenvalues: &DVector<T>, d: usize) -> Result<T> {
    let kept = functions.ncols();
    if d == 0 || d > kept || kept > eigenvalues.len() {
        return Err(Error::InvalidArgument(format!("need 1 ≤ d ≤ kept ≤ eigenvalue count, got d = {d}, kept = {kept}")));
    }
    if gram.nrows() != functions.nrows() || gram.ncols() != functions.nrows() {
        return Err(Error::InvalidArgument("kernel Gram must be square with one row per sample".into()));
    }
    let a = functions.columns(0, d).into_owned();
    let (pinv, _) = regularized_pinv(&a, T::zero())?;
    let tail_coeffs = &pinv * functions;
    let mut total = T::zero();
    for k in (d..kept).rev() {
        total += eigenvalues[k] * tail_coeffs.column(k).norm_squared();
    }
    let mut remainder = gram.clone();
    for k in 0..kept {
        let col = functions.column(k);
        remainder.gerc(C::new(-eigenvalues[k], T::zero()), &col, &col, C::new(T::one(), T::zero()));
    }
    let x = &pinv * remainder * pinv.adjoint();
    total += (0..x.nrows()).fold(T::zero(), |acc, i| acc + x[(i, i)].re);
    Ok(total.max(T::zero()))
}

/// `trace(Z Λ Z^H)` with `Z = A^† P A`, where `P` projects onto the interferer subspace.
pub fn nulling_bias<T: Real>(a: &DMatrix<C<T>>, interferer_projection: &DMatrix<C<T>>, eigenvalues: &DVector<T>) -> Result<T> {
    let d = a.ncols();
    if d > eigenvalues.len() {
        return Err(Error::InvalidArgument("fewer eigenvalues than model columns".into()));
    }
    let (pinv, _) = regularized_pinv(a, T::zero())?;
    let z = pinv * interferer_projection * a;
    Ok((0..d).fold(T::zero(), |acc, k| acc + eigenvalues[k] * z.column(k).norm_squared()))
}

/// `trace((A^H A)^{-1})`.
pub fn variance_multiplier<T: Real>(a: &DMatrix<C<T>>) -> Result<T> {
    let (pinv, _) = regularized_pinv(a, T::zero())?;
    Ok(pinv.norm_squared())
}

/// Phased samples of every kept unit-norm eigenfunction at the scenario's
/// offsets, their eigenvalues, the phased kernel Gram, and `T_N`.
pub struct ExactModel<T: Real> {
    pub functions: DMatrix<C<T>>,
    pub eigenvalues: DVector<T>,
    pub gram: DMatrix<C<T>>,
    pub interval_length: T,
}

impl<T: Real> ExactModel<T> {
    pub fn new(scenario: &ArrayScenario<T>, grid_density: usize) -> Result<Self> {
        let basis = scenario_basis(scenario, T::lit(TAIL_TOLERANCE), grid_density)?;
        let model = build_forward_using(scenario, &basis, basis.kept(), Evaluation::Exact)?;
        let (len, _) = scenario_interval(scenario);
        let gram = model.phased_kernel_gram(scenario.bandwidth);
        let functions = model.stacked_matrix / cre(len.sqrt());
        Ok(ExactModel { functions, eigenvalues: basis.eigenvalues().clone(), gram, interval_length: len })
    }

    pub fn kept(&self) -> usize {
        self.functions.ncols()
    }

    /// The first `d` columns with unit-RMS scaling, as in the forward model.
    pub fn model_matrix(&self, d: usize) -> DMatrix<C<T>> {
        self.functions.columns(0, d) * cre(self.interval_length.sqrt())
    }

    /// Budget at dimension `d` for a unit-power flat-spectrum signal.
    pub fn budget(&self, bandwidth: T, d: usize) -> Result<ErrorBudget<T>> {
        if d == 0 || d > self.kept() {
            return Err(Error::InvalidArgument(format!("dimension {d} must lie in 1..={}", self.kept())));
        }
        let wt = bandwidth * self.interval_length;
        let mass = T::lit(2.0) * wt;
        Ok(ErrorBudget {
            truncation_bias: truncation_bias(&self.eigenvalues, d)? / mass,
            mismatch_bias: mismatch_bias(&self.functions, &self.gram, &self.eigenvalues, d)? / mass,
            variance_multiplier: variance_multiplier(&self.model_matrix(d))?,
            nulling_bias: None,
            time_bandwidth: wt,
            dimension: d,
        })
    }
}

/// Error budget of the least-squares beamformer at dimension `d`.
pub fn error_budget<T: Real>(scenario: &ArrayScenario<T>, d: usize, grid_density: usize) -> Result<ErrorBudget<T>> {
    ExactModel::new(scenario, grid_density)?.budget(scenario.bandwidth, d)
}

/// `10 log10(‖truth‖² / ‖truth - estimate‖²)`, capped at [`SNR_CAP_DB`].
pub fn beamformed_snr<T: Real>(estimate: &DVector<C<T>>, truth: &DVector<C<T>>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::InvalidArgument(format!("estimate has {} samples, truth has {}", estimate.len(), truth.len())));
    }
    let signal = truth.norm_squared().as_f64();
    if !(signal > 0.0) {
        return Err(Error::InvalidArgument("truth has zero energy; SNR is undefined".into()));
    }
    let err = (truth - estimate).norm_squared().as_f64();
    if err <= 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / err).log10()).min(SNR_CAP_DB))
}

pub fn array_gain(nominal_snr_db: f64, beamformed_snr_db: f64) -> f64 {
    beamformed_snr_db - nominal_snr_db
}

/// `10 log10(M)`.
pub fn ideal_gain(elements: usize) -> f64 {
    10.0 * (elements as f64).log10()
}

/// `10 log10(MN / D)`, the gain of an unbiased fit of `D` coefficients.
pub fn model_gain(elements: usize, snapshots: usize, dimension: usize) -> f64 {
    10.0 * ((elements * snapshots) as f64 / dimension as f64).log10()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Relative Frobenius distance `‖a - b‖ / ‖b‖`.
pub fn relative_error<T: Real>(a: &DMatrix<C<T>>, b: &DMatrix<C<T>>) -> T {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom > T::zero() {
        diff / denom
    } else {
        diff
    }
}

/// Largest entry modulus.
pub fn max_modulus<T: Real>(a: &DMatrix<C<T>>) -> T {
    a.iter().fold(T::zero(), |m, z| m.max(z.modulus()))
}
