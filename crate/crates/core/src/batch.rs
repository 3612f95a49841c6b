//! Batch least-squares beamforming and the delay-and-sum baseline.

use nalgebra::{DMatrix, DVector};

use crate::array::ArrayScenario;
use crate::error::{Error, Result};
use crate::forward::{self, scenario_interval, ForwardModel};
use crate::scalar::{cis, cre, Real, C};
use crate::slepian::SlepianBasis;

/// Condition number above which a solve is flagged and regularized.
pub const CONDITION_LIMIT: f64 = 1e10;

/// `M × N` array samples, one column per snapshot.
#[derive(Clone, Debug)]
pub struct SnapshotBatch<T: Real> {
    pub samples: DMatrix<C<T>>,
    pub times: DVector<T>,
}

/// Estimated Slepian coefficients with a tag naming the basis they refer to.
#[derive(Clone, Debug)]
pub struct CoefficientVector<T: Real> {
    pub values: DVector<C<T>>,
    pub basis_ref: String,
}

#[derive(Clone, Debug)]
pub struct LsSolution<T: Real> {
    pub coefficients: CoefficientVector<T>,
    /// `‖ȳ - A α̂‖`.
    pub residual: T,
    pub condition: T,
    /// Set when the condition number exceeded [`CONDITION_LIMIT`].
    pub ill_conditioned: bool,
}

/// Precomputed regularized pseudo-inverse of a forward model; shareable across trials.
#[derive(Clone, Debug)]
pub struct LeastSquares<T: Real> {
    pub pinv: DMatrix<C<T>>,
    pub ridge: T,
    pub condition: T,
    pub ill_conditioned: bool,
    basis_ref: String,
}

/// Short identifier of a basis: band, interval and tolerance.
pub fn basis_id<T: Real>(basis: &SlepianBasis<T>) -> String {
    format!(
        "slepian(omega={:e},T={:e},eps={:e})",
        basis.bandwidth().as_f64(),
        basis.interval_length().as_f64(),
        basis.tolerance().as_f64()
    )
}

impl<T: Real> SnapshotBatch<T> {
    pub fn new(samples: DMatrix<C<T>>, times: DVector<T>) -> Result<Self> {
        if samples.ncols() != times.len() {
            return Err(Error::InvalidArgument(format!(
                "{} snapshot columns but {} sample times",
                samples.ncols(),
                times.len()
            )));
        }
        Ok(SnapshotBatch { samples, times })
    }

    pub fn element_count(&self) -> usize {
        self.samples.nrows()
    }

    pub fn snapshot_count(&self) -> usize {
        self.samples.ncols()
    }

    /// Stacked vector `ȳ`, snapshot-major (`ℓ = n·M + m`).
    pub fn stacked(&self) -> DVector<C<T>> {
        DVector::from_column_slice(self.samples.as_slice())
    }

    pub fn from_stacked(y: &DVector<C<T>>, elements: usize, times: DVector<T>) -> Result<Self> {
        if y.len() != elements * times.len() {
            return Err(Error::InvalidArgument(format!(
                "stacked length {} is not {elements} × {}",
                y.len(),
                times.len()
            )));
        }
        Self::new(DMatrix::from_column_slice(elements, times.len(), y.as_slice()), times)
    }
}

/// Pseudo-inverse with Tikhonov ridge, `V diag(s/(s² + r)) U^H`.
pub fn regularized_pinv<T: Real>(a: &DMatrix<C<T>>, ridge: T) -> Result<(DMatrix<C<T>>, T)> {
    let svd = a.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Numerical("SVD did not return singular vectors".into())),
    };
    let s = &svd.singular_values;
    let smax = s.max();
    let smin = s.min();
    let cond = if smin > T::zero() { smax / smin } else { T::max_value().unwrap_or(T::one() / T::TINY) };
    let cutoff = smax * T::default_epsilon() * T::from_usize_lossy(a.nrows().max(a.ncols()));
    let inv = s.map(|x| {
        if ridge > T::zero() {
            x / (x * x + ridge)
        } else if x > cutoff {
            T::one() / x
        } else {
            T::zero()
        }
    });
    let mut v = vt.adjoint();
    for (k, mut col) in v.column_iter_mut().enumerate() {
        col *= cre(inv[k]);
    }
    Ok((v * u.adjoint(), cond))
}

impl<T: Real> LeastSquares<T> {
    /// `δ = 0` gives the SVD pseudo-inverse; `δ > 0` gives `(A^H A + 2δI)^{-1} A^H`.
    /// An ill-conditioned `A` with `δ = 0` falls back to the ridge `1e-8 σ_max²`.
    pub fn new(model: &ForwardModel<T>, delta: T, basis_ref: impl Into<String>) -> Result<Self> {
        Self::from_matrix(&model.stacked_matrix, delta, basis_ref)
    }

    pub fn from_matrix(a: &DMatrix<C<T>>, delta: T, basis_ref: impl Into<String>) -> Result<Self> {
        if delta < T::zero() {
            return Err(Error::InvalidArgument("ridge δ must be non-negative".into()));
        }
        let (mut pinv, condition) = regularized_pinv(a, T::lit(2.0) * delta)?;
        let ill = condition.as_f64() > CONDITION_LIMIT;
        let mut ridge = T::lit(2.0) * delta;
        if ill && delta == T::zero() {
            let smax = a.clone().singular_values().max();
            ridge = T::lit(1e-8) * smax * smax;
            pinv = regularized_pinv(a, ridge)?.0;
        }
        Ok(LeastSquares { pinv, ridge, condition, ill_conditioned: ill, basis_ref: basis_ref.into() })
    }

    pub fn apply(&self, y: &DVector<C<T>>) -> Result<DVector<C<T>>> {
        if y.len() != self.pinv.ncols() {
            return Err(Error::InvalidArgument(format!(
                "stacked data has length {}, model expects {}",
                y.len(),
                self.pinv.ncols()
            )));
        }
        Ok(&self.pinv * y)
    }

    pub fn solve(&self, model: &ForwardModel<T>, batch: &SnapshotBatch<T>) -> Result<LsSolution<T>> {
        let y = batch.stacked();
        let alpha = self.apply(&y)?;
        let residual = (&y - &model.stacked_matrix * &alpha).norm();
        Ok(LsSolution {
            coefficients: CoefficientVector { values: alpha, basis_ref: self.basis_ref.clone() },
            residual,
            condition: self.condition,
            ill_conditioned: self.ill_conditioned,
        })
    }

    /// Composite weights `W(θ) = Ψ A(θ)†`.
    pub fn composite_weights(&self, synthesis: &DMatrix<C<T>>) -> DMatrix<C<T>> {
        synthesis * &self.pinv
    }
}

pub fn solve_ls<T: Real>(model: &ForwardModel<T>, batch: &SnapshotBatch<T>, delta: T) -> Result<LsSolution<T>> {
    LeastSquares::new(model, delta, "")?.solve(model, batch)
}

/// Orthonormal basis `U` (M × D_1) for the single-snapshot Slepian space,
/// `D_1 = ⌈2ΩT_1⌉ + margin`.
pub fn snapshot_subspace<T: Real>(scenario: &ArrayScenario<T>, margin: usize, grid_density: usize) -> Result<DMatrix<C<T>>> {
    let m = scenario.element_count();
    let t1 = scenario.span();
    let d1 = (T::lit(2.0) * scenario.bandwidth * t1).as_f64().ceil() as usize + margin;
    if d1 > m {
        return Err(Error::InsufficientElements { needed: d1, available: m });
    }
    if d1 == 0 {
        return Err(Error::InvalidArgument("single-snapshot dimension must be positive".into()));
    }
    let single = scenario.with_n_snapshots(1)?;
    let basis = forward::scenario_basis(&single, T::lit(1e-12), grid_density)?;
    let (_, pad) = scenario_interval(&single);
    let tau = scenario.delays();
    let tmax = tau.max();
    let offsets: Vec<T> = tau.iter().map(|&t| tmax - t + pad).collect();
    if d1 > basis.kept() {
        return Err(Error::InvalidArgument(format!(
            "single-snapshot dimension {d1} exceeds the {} available basis functions",
            basis.kept()
        )));
    }
    let mut s = forward::scaled_samples(&basis, &offsets, d1)?;
    let two_pi_fc = T::two_pi() * scenario.geometry.carrier;
    for (e, mut row) in s.row_iter_mut().enumerate() {
        row *= cis(-two_pi_fc * tau[e]);
    }
    let svd = s.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD did not return singular vectors".into()))?;
    Ok(u.columns(0, d1).into_owned())
}

/// Snapshot-encoded solver: `β_n = U^H y[n]`, `C_n = U^H A_n`,
/// `α̂ = (Σ C_n^H C_n + δI)^{-1} Σ C_n^H β_n`.
#[derive(Clone, Debug)]
pub struct EncodedSolver<T: Real> {
    pub encoder: DMatrix<C<T>>,
    pub blocks: Vec<DMatrix<C<T>>>,
    gram_inv: DMatrix<C<T>>,
}

impl<T: Real> EncodedSolver<T> {
    pub fn new(model: &ForwardModel<T>, encoder: DMatrix<C<T>>, delta: T) -> Result<Self> {
        if encoder.nrows() != model.element_count {
            return Err(Error::InvalidArgument("encoder rows must equal the element count".into()));
        }
        let d = model.dimension();
        let uh = encoder.adjoint();
        let blocks: Vec<DMatrix<C<T>>> = (0..model.snapshot_count).map(|n| &uh * model.per_snapshot(n)).collect();
        let mut gram = DMatrix::from_diagonal_element(d, d, cre(delta));
        for c in &blocks {
            gram += c.adjoint() * c;
        }
        let gram_inv = gram
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| gram.try_inverse())
            .ok_or_else(|| Error::Numerical("encoded normal equations are singular; use δ > 0".into()))?;
        Ok(EncodedSolver { encoder, blocks, gram_inv })
    }

    pub fn solve(&self, batch: &SnapshotBatch<T>) -> Result<DVector<C<T>>> {
        if batch.snapshot_count() != self.blocks.len() || batch.element_count() != self.encoder.nrows() {
            return Err(Error::InvalidArgument("batch shape does not match the encoded model".into()));
        }
        let uh = self.encoder.adjoint();
        let d = self.gram_inv.nrows();
        let mut rhs = DVector::zeros(d);
        for (n, c) in self.blocks.iter().enumerate() {
            let beta = &uh * batch.samples.column(n);
            rhs += c.adjoint() * beta;
        }
        Ok(&self.gram_inv * rhs)
    }
}

pub fn encoded_solve<T: Real>(
    scenario: &ArrayScenario<T>,
    model: &ForwardModel<T>,
    batch: &SnapshotBatch<T>,
    margin: usize,
    delta: T,
    grid_density: usize,
) -> Result<CoefficientVector<T>> {
    let u = snapshot_subspace(scenario, margin, grid_density)?;
    let values = EncodedSolver::new(model, u, delta)?.solve(batch)?;
    Ok(CoefficientVector { values, basis_ref: String::new() })
}

/// Normalized sinc `sin(πx)/(πx)`, exactly zero at nonzero integers.
pub fn sinc<T: Real>(x: T) -> T {
    if x == T::zero() {
        return T::one();
    }
    if x == x.round() {
        return T::zero();
    }
    let px = T::pi() * x;
    px.sin() / px
}

/// Delay-and-sum with `R`-tap truncated-sinc fractional delays.
///
/// Each element stream is phase-corrected by `e^{+j2πf_c τ_m}`, advanced by `τ_m`
/// and the results are averaged. Samples outside the batch count as zero.
pub fn delay_and_sum<T: Real>(batch: &SnapshotBatch<T>, scenario: &ArrayScenario<T>, taps: usize) -> Result<DVector<C<T>>> {
    if taps == 0 {
        return Err(Error::InvalidArgument("delay-and-sum needs at least one tap".into()));
    }
    let tau = scenario.delays();
    if tau.len() != batch.element_count() {
        return Err(Error::InvalidArgument("batch rows do not match the array".into()));
    }
    let n = batch.snapshot_count();
    let ts = scenario.sample_interval();
    let two_pi_fc = T::two_pi() * scenario.geometry.carrier;
    let half = T::from_usize_lossy(taps) / T::lit(2.0);
    let mut out = DVector::zeros(n);
    for (m, &tm) in tau.iter().enumerate() {
        let phase = cis(two_pi_fc * tm);
        let shift = tm / ts;
        for k in 0..n {
            let x = T::from_usize_lossy(k) + shift;
            let start = (x - half).ceil().as_f64() as i64;
            let mut acc = C::new(T::zero(), T::zero());
            for j in start..start + taps as i64 {
                if j < 0 || j >= n as i64 {
                    continue;
                }
                let w = sinc(x - T::lit(j as f64));
                acc += batch.samples[(m, j as usize)] * w;
            }
            out[k] += acc * phase;
        }
    }
    Ok(out / cre(T::from_usize_lossy(tau.len())))
}

/// `ŝ = Ψ α̂` at `output_times` (basis coordinates).
pub fn synthesize_samples<T: Real>(basis: &SlepianBasis<T>, alpha: &DVector<C<T>>, output_times: &[T]) -> Result<DVector<C<T>>> {
    let psi = forward::build_synthesis(basis, output_times, alpha.len())?;
    Ok(psi * alpha)
}

/// Pseudo-inverse condition check without forming the inverse.
pub fn condition_number<T: Real>(a: &DMatrix<C<T>>) -> T {
    let s = a.clone().singular_values();
    let lo = s.min();
    if lo > T::zero() {
        s.max() / lo
    } else {
        T::max_value().unwrap_or(T::one() / T::TINY)
    }
}
