//! Interferer nulling, MVDR/LCMV weights and low-rank covariance inversion.

use nalgebra::{ComplexField, DMatrix, DVector};

use crate::array::{ArrayScenario, ArrivalAngle};
use crate::error::{Error, Result};
use crate::forward::{build_forward_using, scenario_basis, Evaluation};
use crate::scalar::{cre, Real, C};
use crate::slepian::SlepianBasis;

/// Relative singular-value cutoff for numerical range computations.
pub const RANGE_CUTOFF: f64 = 1e-12;

/// Ridge applied to a singular MVDR normal matrix, relative to its mean diagonal.
pub const MVDR_RIDGE: f64 = 1e-10;

fn one<T: Real>() -> C<T> {
    C::new(T::one(), T::zero())
}

/// Orthonormal basis of the numerical range of `a` (cutoff relative to `σ_max`).
pub fn orthonormal_range<T: Real>(a: &DMatrix<C<T>>, cutoff: T) -> Result<DMatrix<C<T>>> {
    if a.ncols() == 0 {
        return Ok(DMatrix::zeros(a.nrows(), 0));
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD did not return left singular vectors".into()))?;
    let s = &svd.singular_values;
    let smax = s.max();
    let mut idx: Vec<usize> = (0..s.len()).filter(|&k| s[k] > cutoff * smax && s[k] > T::zero()).collect();
    idx.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).expect("finite singular values"));
    Ok(u.select_columns(idx.iter()))
}

/// `P⊥ = I - Q Q^H` for an orthonormal basis `Q` of the interferer subspace.
#[derive(Clone, Debug)]
pub struct NullProjector<T: Real> {
    pub projector: DMatrix<C<T>>,
    pub interferer_dim: usize,
    /// Numerical rank of the interferer model (less than `interferer_dim` if deficient).
    pub rank: usize,
}

impl<T: Real> NullProjector<T> {
    /// The complementary projector `P = I - P⊥` onto the interferer subspace.
    pub fn interferer_projection(&self) -> DMatrix<C<T>> {
        DMatrix::identity(self.projector.nrows(), self.projector.ncols()) - &self.projector
    }

    pub fn apply(&self, y: &DVector<C<T>>) -> DVector<C<T>> {
        &self.projector * y
    }
}

pub fn null_projector<T: Real>(interferer_model: &DMatrix<C<T>>) -> Result<NullProjector<T>> {
    let q = orthonormal_range(interferer_model, T::lit(RANGE_CUTOFF))?;
    let n = interferer_model.nrows();
    let mut p = DMatrix::identity(n, n);
    p.gemm(-one::<T>(), &q, &q.adjoint(), one());
    // Symmetrize away rounding.
    let p = (&p + p.adjoint()) * cre(T::lit(0.5));
    Ok(NullProjector { projector: p, interferer_dim: interferer_model.ncols(), rank: q.ncols() })
}

/// Covariance `U C U^H + σ² I`.
#[derive(Clone, Debug)]
pub struct CovarianceModel<T: Real> {
    pub low_rank_basis: DMatrix<C<T>>,
    pub core: DMatrix<C<T>>,
    pub noise_power: T,
}

/// Per-source description for [`build_covariance`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Source<T: Real> {
    pub angle: ArrivalAngle<T>,
    pub power: T,
}

impl<T: Real> CovarianceModel<T> {
    pub fn white(rows: usize, noise_power: T) -> Self {
        CovarianceModel { low_rank_basis: DMatrix::zeros(rows, 0), core: DMatrix::zeros(0, 0), noise_power }
    }

    pub fn rows(&self) -> usize {
        self.low_rank_basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.low_rank_basis.ncols()
    }

    pub fn dense(&self) -> DMatrix<C<T>> {
        let u = &self.low_rank_basis;
        let mut r = u * &self.core * u.adjoint();
        for i in 0..r.nrows() {
            r[(i, i)] += cre(self.noise_power);
        }
        r
    }

    /// Same model with every term scaled by `c`.
    pub fn scaled(&self, c: T) -> Self {
        CovarianceModel { low_rank_basis: self.low_rank_basis.clone(), core: &self.core * cre(c), noise_power: self.noise_power * c }
    }

    /// Appends the factors of `other` (same rows); noise powers add.
    pub fn combine(&self, other: &Self) -> Result<Self> {
        if self.rows() != other.rows() {
            return Err(Error::InvalidArgument("covariance models have different sizes".into()));
        }
        let (k1, k2) = (self.rank(), other.rank());
        let mut u = DMatrix::zeros(self.rows(), k1 + k2);
        u.columns_mut(0, k1).copy_from(&self.low_rank_basis);
        u.columns_mut(k1, k2).copy_from(&other.low_rank_basis);
        let mut c = DMatrix::zeros(k1 + k2, k1 + k2);
        c.view_mut((0, 0), (k1, k1)).copy_from(&self.core);
        c.view_mut((k1, k1), (k2, k2)).copy_from(&other.core);
        Ok(CovarianceModel { low_rank_basis: u, core: c, noise_power: self.noise_power + other.noise_power })
    }

    /// True if the core matrix is numerically singular.
    pub fn core_is_singular(&self) -> bool {
        if self.rank() == 0 {
            return false;
        }
        let s = self.core.clone().singular_values();
        s.min() <= s.max() * T::lit(RANGE_CUTOFF)
    }
}

/// `R^{-1} X` through the Woodbury identity in the form
/// `X/σ² - U C (σ² I + U^H U C)^{-1} U^H X / σ²`, which never inverts `C`.
pub fn woodbury_apply<T: Real>(model: &CovarianceModel<T>, x: &DMatrix<C<T>>) -> Result<DMatrix<C<T>>> {
    let s2 = model.noise_power;
    if !(s2 > T::zero()) {
        return Err(Error::InvalidArgument("Woodbury inversion needs a positive noise power".into()));
    }
    if x.nrows() != model.rows() {
        return Err(Error::InvalidArgument(format!("right-hand side has {} rows, covariance has {}", x.nrows(), model.rows())));
    }
    let inv_s2 = cre(T::one() / s2);
    if model.rank() == 0 {
        return Ok(x * inv_s2);
    }
    let u = &model.low_rank_basis;
    let uhx = u.adjoint() * x;
    let mut inner = u.adjoint() * u * &model.core;
    for i in 0..inner.nrows() {
        inner[(i, i)] += cre(s2);
    }
    let lu = inner.lu();
    let solved = lu
        .solve(&uhx)
        .ok_or_else(|| Error::Numerical("Woodbury capacitance matrix is singular".into()))?;
    let corr = u * (&model.core * solved);
    Ok((x - corr) * inv_s2)
}

/// Low-rank model of one source's array covariance: the phased Slepian
/// samples weighted by `power · λ_k / (2ΩT)`, orthonormalized, and truncated
/// to the smallest rank carrying `1 - ε` of the trace.
pub fn source_covariance<T: Real>(
    scenario: &ArrayScenario<T>,
    source: &Source<T>,
    tolerance: T,
    grid_density: usize,
) -> Result<CovarianceModel<T>> {
    let s = scenario.with_angle(source.angle);
    let basis = scenario_basis(&s, tolerance.min(T::lit(1e-12)), grid_density)?;
    let model = build_forward_using(&s, &basis, basis.kept(), Evaluation::Exact)?;
    let mass = T::lit(2.0) * basis.time_bandwidth();
    let weights: Vec<T> = (0..basis.kept()).map(|k| (source.power * basis.eigenvalues()[k] / mass).max(T::zero()).sqrt()).collect();
    let mut g = model.stacked_matrix;
    for (k, mut col) in g.column_iter_mut().enumerate() {
        col *= cre(weights[k]);
    }
    let rows = g.nrows();
    let (u, var) = truncated_factor(g, tolerance, source.power * T::from_usize_lossy(rows))?;
    Ok(CovarianceModel { low_rank_basis: u, core: DMatrix::from_diagonal(&var.map(cre)), noise_power: T::zero() })
}

/// Left singular vectors and squared singular values of `g`, truncated so the
/// discarded part is at most `ε · total_trace`.
fn truncated_factor<T: Real>(g: DMatrix<C<T>>, tolerance: T, total_trace: T) -> Result<(DMatrix<C<T>>, DVector<T>)> {
    let svd = g.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD did not return left singular vectors".into()))?;
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).expect("finite singular values"));
    let var: Vec<T> = order.iter().map(|&i| s[i] * s[i]).collect();
    let budget = tolerance * total_trace;
    let mut tail = total_trace - var.iter().fold(T::zero(), |a, &v| a + v);
    let mut k = var.len();
    while k > 1 && tail + var[k - 1] <= budget {
        tail += var[k - 1];
        k -= 1;
    }
    Ok((u.select_columns(order[..k].iter()), DVector::from_iterator(k, var[..k].iter().copied())))
}

/// Covariance of the interferers, plus the look-direction signal of power
/// `signal_power` when given (MPDR), plus white noise.
pub fn build_covariance<T: Real>(
    scenario: &ArrayScenario<T>,
    interferers: &[Source<T>],
    noise_power: T,
    signal_power: Option<T>,
    tolerance: T,
    grid_density: usize,
) -> Result<CovarianceModel<T>> {
    let rows = scenario.element_count() * scenario.snapshot_count();
    let mut model = CovarianceModel::white(rows, noise_power);
    let look = signal_power.map(|p| Source { angle: scenario.angle, power: p });
    for src in look.iter().chain(interferers) {
        if src.power > T::zero() {
            model = model.combine(&source_covariance(scenario, src, tolerance, grid_density)?)?;
        }
    }
    Ok(model)
}

/// Dense covariance `Σ p_i B(θ_i)/(2Ω) + σ² I` from the kernel Gram.
pub fn dense_covariance<T: Real>(scenario: &ArrayScenario<T>, sources: &[Source<T>], noise_power: T, grid_density: usize) -> Result<DMatrix<C<T>>> {
    let rows = scenario.element_count() * scenario.snapshot_count();
    let mut r = DMatrix::identity(rows, rows) * cre(noise_power);
    for src in sources {
        let s = scenario.with_angle(src.angle);
        let basis = scenario_basis(&s, T::lit(1e-3), grid_density)?;
        let model = build_forward_using(&s, &basis, 1, Evaluation::Interpolated)?;
        let b = model.phased_kernel_gram(s.bandwidth);
        r += b * cre(src.power / (T::lit(2.0) * s.bandwidth));
    }
    Ok(r)
}

/// Weights `W` (D × MN) with `W A = I`.
#[derive(Clone, Debug)]
pub struct AdaptiveWeights<T: Real> {
    pub weights: DMatrix<C<T>>,
    /// Set when the normal matrix had to be regularized.
    pub regularized: bool,
}

impl<T: Real> AdaptiveWeights<T> {
    pub fn apply(&self, y: &DVector<C<T>>) -> DVector<C<T>> {
        &self.weights * y
    }

    /// `trace(W R W^H)`.
    pub fn output_power(&self, covariance: &CovarianceModel<T>) -> T {
        let w = &self.weights;
        let u = &covariance.low_rank_basis;
        let wu = w * u;
        let low = (&wu * &covariance.core * wu.adjoint()).trace().re;
        low + covariance.noise_power * w.norm_squared()
    }
}

fn hermitian_solve<T: Real>(g: DMatrix<C<T>>, rhs: &DMatrix<C<T>>) -> Result<(DMatrix<C<T>>, bool)> {
    let g = (&g + g.adjoint()) * cre(T::lit(0.5));
    let s = g.clone().singular_values();
    let singular = s.min() <= s.max() * T::lit(1e-13);
    let g = if singular {
        let mean_diag = (0..g.nrows()).fold(T::zero(), |a, i| a + g[(i, i)].re) / T::from_usize_lossy(g.nrows());
        let mut g = g;
        for i in 0..g.nrows() {
            g[(i, i)] += cre(mean_diag * T::lit(MVDR_RIDGE));
        }
        g
    } else {
        g
    };
    let x = g.lu().solve(rhs).ok_or_else(|| Error::Numerical("normal matrix is singular after regularization".into()))?;
    Ok((x, singular))
}

/// `W = (A^H R^{-1} A)^{-1} A^H R^{-1}`.
pub fn mvdr_weights<T: Real>(a: &DMatrix<C<T>>, covariance: &CovarianceModel<T>) -> Result<AdaptiveWeights<T>> {
    let ria = woodbury_apply(covariance, a)?;
    let g = a.adjoint() * &ria;
    let (w, regularized) = hermitian_solve(g, &ria.adjoint())?;
    Ok(AdaptiveWeights { weights: w, regularized })
}

/// Minimizes `trace(W R W^H)` subject to `W A = I` and `W F_i = G_i` for each
/// extra constraint `(F_i, G_i)`.
pub fn lcmv_weights<T: Real>(
    a: &DMatrix<C<T>>,
    covariance: &CovarianceModel<T>,
    extra_constraints: &[(DMatrix<C<T>>, DMatrix<C<T>>)],
) -> Result<AdaptiveWeights<T>> {
    let d = a.ncols();
    let rows = a.nrows();
    let total: usize = d + extra_constraints.iter().map(|(f, _)| f.ncols()).sum::<usize>();
    let mut cons = DMatrix::zeros(rows, total);
    let mut rhs = DMatrix::zeros(d, total);
    cons.columns_mut(0, d).copy_from(a);
    rhs.view_mut((0, 0), (d, d)).fill_with_identity();
    let rank_of = |m: &DMatrix<C<T>>| -> usize {
        let s = m.clone().singular_values();
        let smax = s.max();
        s.iter().filter(|&&x| x > smax * T::lit(1e-10)).count()
    };
    if rank_of(&cons.columns(0, d).into_owned()) < d {
        return Err(Error::DegenerateConstraint { block: 0 });
    }
    let mut col = d;
    for (i, (f, g)) in extra_constraints.iter().enumerate() {
        if f.nrows() != rows || g.nrows() != d || g.ncols() != f.ncols() {
            return Err(Error::InvalidArgument(format!("constraint block {} has mismatched shape", i + 1)));
        }
        let p = f.ncols();
        cons.columns_mut(col, p).copy_from(f);
        rhs.columns_mut(col, p).copy_from(g);
        col += p;
        if rank_of(&cons.columns(0, col).into_owned()) < col {
            return Err(Error::DegenerateConstraint { block: i + 1 });
        }
    }
    // Stationarity gives W = Λ C^H R^{-1}; feasibility gives Λ (C^H R^{-1} C) = G.
    let ric = woodbury_apply(covariance, &cons)?;
    let g = cons.adjoint() * &ric;
    let (x, regularized) = hermitian_solve(g, &rhs.adjoint())?;
    let weights = x.adjoint() * ric.adjoint();
    Ok(AdaptiveWeights { weights, regularized })
}

/// Factors `(U_nu, C_nu)` of the covariance at arbitrary `times`: the basis
/// samples are interpolated to `times`, weighted by `√λ_k`, and
/// re-orthogonalized so `U_nu` is orthonormal.
pub fn interpolate_basis_nonuniform<T: Real>(
    basis: &SlepianBasis<T>,
    count: usize,
    times: &[T],
) -> Result<(DMatrix<C<T>>, DVector<T>)> {
    let s = basis.evaluate_leading(count, times)?;
    let mut g = s.map(cre);
    for (k, mut col) in g.column_iter_mut().enumerate() {
        col *= cre(basis.eigenvalues()[k].max(T::zero()).sqrt());
    }
    let svd = g.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD did not return left singular vectors".into()))?;
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).expect("finite singular values"));
    let var = DVector::from_iterator(order.len(), order.iter().map(|&i| sv[i] * sv[i]));
    Ok((u.select_columns(order.iter()), var))
}

/// Eigenvalues of a Hermitian matrix, sorted non-increasing.
pub fn hermitian_eigenvalues<T: Real>(m: &DMatrix<C<T>>) -> DVector<T> {
    let h = (m + m.adjoint()) * cre(T::lit(0.5));
    let mut v: Vec<T> = h.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    DVector::from_vec(v)
}

/// Deviation of `W A` from the identity, max-modulus.
pub fn distortionless_error<T: Real>(w: &DMatrix<C<T>>, a: &DMatrix<C<T>>) -> T {
    let wa = w * a;
    let n = wa.nrows();
    (wa - DMatrix::identity(n, n)).iter().fold(T::zero(), |m, z| m.max(z.modulus()))
}
