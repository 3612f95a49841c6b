//! Slepian (prolate spheroidal) bases of time-limited, band-limited signals.
//!
//! The kernel is `k(t, s) = sin(2πΩ(t - s)) / (π(t - s))` with limit `2Ω` on the
//! diagonal, so the operator trace on `[0, T]` is `2ΩT`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest time-bandwidth product accepted by [`SlepianBasis::build`].
pub const MAX_TIME_BANDWIDTH: f64 = 1e4;

/// Number of basis functions kept beyond the dimension `d(ΩT)`.
pub const EXTRA_FUNCTIONS: usize = 8;

/// Stencil width of the local interpolator used by [`SlepianBasis::evaluate`].
pub const INTERP_ORDER: usize = 8;

const MIN_GRID: usize = 1024;

/// Orthonormal band-limited basis on `[0, T]` with its eigenvalues.
#[derive(Clone, Debug)]
pub struct SlepianBasis<T: Real> {
    bandwidth: T,
    interval_length: T,
    tolerance: T,
    grid_density: usize,
    grid_times: DVector<T>,
    basis_samples: DMatrix<T>,
    eigenvalues: DVector<T>,
    dimension: usize,
}

/// Result of the tolerance-driven dimension rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DimensionSelection {
    pub time_bandwidth: f64,
    pub dimension: usize,
    pub tolerance: f64,
}

/// Gauss-Legendre nodes (ascending, on `[-1, 1]`) and weights.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = nf * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Quadrature size for a given `ΩT`; always even so that the parity split applies.
pub fn node_count(time_bandwidth: f64) -> usize {
    let n = ((1.1 * std::f64::consts::PI * time_bandwidth).ceil() as usize + 40).max(32);
    n + n % 2
}

fn grid_size(time_bandwidth: f64, grid_density: usize) -> usize {
    MIN_GRID.max(grid_density * (2.0 * time_bandwidth).ceil() as usize)
}

fn check_args(bandwidth: f64, length: f64, tolerance: f64) -> Result<f64> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::InvalidArgument(format!("interval length must be positive, got {length}")));
    }
    if !(tolerance > 0.0 && tolerance < 0.5) {
        return Err(Error::InvalidArgument(format!("tolerance must lie in (0, 1/2), got {tolerance}")));
    }
    let c = bandwidth * length;
    if c > MAX_TIME_BANDWIDTH {
        return Err(Error::InvalidArgument(format!(
            "time-bandwidth product {c} exceeds {MAX_TIME_BANDWIDTH}; the grid would be impractical"
        )));
    }
    Ok(c)
}

/// Quadrature-weighted kernel split into its even and odd blocks.
struct ParitySplit<T: Real> {
    nodes: Vec<f64>,
    even: DMatrix<T>,
    odd: DMatrix<T>,
}

fn parity_split<T: Real>(c: f64, n: usize) -> ParitySplit<T> {
    let h = n / 2;
    let (x, w) = gauss_legendre(n);
    let u: Vec<f64> = x.iter().map(|&xi| 0.5 * (xi + 1.0)).collect();
    let wu: Vec<f64> = w.iter().map(|&wi| 0.5 * wi).collect();
    let two_pi_c = 2.0 * std::f64::consts::PI * c;
    let kern = |i: usize, j: usize| -> f64 {
        let d = u[i] - u[j];
        let k = if i == j { 2.0 * c } else { (two_pi_c * d).sin() / (std::f64::consts::PI * d) };
        k * (wu[i] * wu[j]).sqrt()
    };
    let mut even = DMatrix::<T>::zeros(h, h);
    let mut odd = DMatrix::<T>::zeros(h, h);
    for i in 0..h {
        for j in 0..=i {
            let a = kern(i, j);
            let b = kern(i, n - 1 - j);
            even[(i, j)] = T::lit(a + b);
            even[(j, i)] = T::lit(a + b);
            odd[(i, j)] = T::lit(a - b);
            odd[(j, i)] = T::lit(a - b);
        }
    }
    ParitySplit { nodes: u, even, odd }
}

fn clamp_eigenvalue<T: Real>(l: T) -> T {
    let upper = T::one() - T::default_epsilon();
    if l < T::TINY {
        T::TINY
    } else if l > upper {
        upper
    } else {
        l
    }
}

/// All operator eigenvalues for time-bandwidth product `c`, sorted non-increasing.
pub fn eigenvalues<T: Real>(c: f64) -> Result<DVector<T>> {
    eigenvalues_with_nodes(c, node_count(c))
}

/// Same as [`eigenvalues`] with an explicit (even) quadrature size.
pub fn eigenvalues_with_nodes<T: Real>(c: f64, nodes: usize) -> Result<DVector<T>> {
    let split = parity_split::<T>(c, nodes + nodes % 2);
    let n = split.nodes.len();
    let mut all: Vec<T> = split
        .even
        .symmetric_eigenvalues()
        .iter()
        .chain(split.odd.symmetric_eigenvalues().iter())
        .copied()
        .collect();
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("eigensolve on {n} quadrature nodes produced non-finite values")));
    }
    all.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    Ok(DVector::from_iterator(n, all.into_iter().map(clamp_eigenvalue)))
}

/// Smallest `d` whose eigenvalue tail carries at most `ε` of the total mass.
pub fn dimension_from_eigenvalues<T: Real>(eigenvalues: &DVector<T>, tolerance: T) -> usize {
    let total: T = eigenvalues.iter().fold(T::zero(), |acc, &l| acc + l);
    let budget = tolerance * total;
    // Accumulate the tail from the smallest eigenvalue up for accuracy.
    let n = eigenvalues.len();
    let mut tail = T::zero();
    let mut d = n;
    for k in (0..n).rev() {
        let next = tail + eigenvalues[k];
        if next > budget {
            break;
        }
        tail = next;
        d = k;
    }
    d.max(1)
}

/// Dimension `d(ΩT)` of `Ω`-band-limited signals on an interval of length `T`.
pub fn dimension(time_bandwidth: f64, tolerance: f64) -> Result<usize> {
    check_args(time_bandwidth, 1.0, tolerance)?;
    let lam = eigenvalues::<f64>(time_bandwidth)?;
    Ok(dimension_from_eigenvalues(&lam, tolerance))
}

pub fn select_dimension(time_bandwidth: f64, tolerance: f64) -> Result<DimensionSelection> {
    Ok(DimensionSelection { time_bandwidth, dimension: dimension(time_bandwidth, tolerance)?, tolerance })
}

/// Size of the Legendre expansion used for the prolate functions.
fn legendre_size(c_rad: f64, count: usize) -> usize {
    let m = (1.5 * c_rad.max(count as f64)).ceil() as usize + 60;
    m + m % 2
}

/// Prolate functions `0..count` sampled at `targets` in `[0, 1]`, unit-normalized there.
///
/// Uses the Legendre-Galerkin form of the differential operator that commutes with
/// the time-band limiting operator (band parameter `c_rad = πΩT`); its spectrum is
/// well separated even where the integral-operator eigenvalues are all near one.
pub fn prolate_functions(c_rad: f64, count: usize, targets: &[f64]) -> Result<DMatrix<f64>> {
    let m = legendre_size(c_rad, count);
    let c2 = c_rad * c_rad;
    let blocks: Vec<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> = (0..2)
        .map(|parity| {
            let size = m / 2;
            let mut a = DMatrix::<f64>::zeros(size, size);
            for i in 0..size {
                let k = (2 * i + parity) as f64;
                a[(i, i)] = k * (k + 1.0) + c2 * (2.0 * k * (k + 1.0) - 1.0) / ((2.0 * k + 3.0) * (2.0 * k - 1.0));
                if i + 1 < size {
                    let off = c2 * (k + 2.0) * (k + 1.0) / ((2.0 * k + 3.0) * ((2.0 * k + 1.0) * (2.0 * k + 5.0)).sqrt());
                    a[(i, i + 1)] = off;
                    a[(i + 1, i)] = off;
                }
            }
            nalgebra::SymmetricEigen::try_new(a, 1e-15, 0)
        })
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Numerical(format!("prolate eigensolve did not converge with {m} Legendre terms")))?;

    // P_k(0), used to fix signs.
    let mut p_at_zero = vec![0.0; m];
    p_at_zero[0] = 1.0;
    for k in 1..m - 1 {
        p_at_zero[k + 1] = -(k as f64) / (k as f64 + 1.0) * p_at_zero[k - 1];
    }

    // Coefficients over all Legendre degrees, one column per function.
    let mut coef = DMatrix::<f64>::zeros(m, count);
    for n in 0..count {
        let parity = n % 2;
        let eig = &blocks[parity];
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).expect("finite"));
        let col = order[n / 2];
        for i in 0..m / 2 {
            coef[(2 * i + parity, n)] = eig.eigenvectors[(i, col)];
        }
        let tail = coef[(m - 2 + parity, n)].abs();
        if tail > 1e-12 {
            return Err(Error::Numerical(format!("Legendre expansion with {m} terms has not converged")));
        }
        // Even functions are positive at the midpoint, odd ones rise through it.
        let mut at_mid = 0.0;
        for k in (parity..m).step_by(2) {
            let value = if parity == 0 { p_at_zero[k] } else { k as f64 * p_at_zero[k - 1] };
            at_mid += coef[(k, n)] * value;
        }
        if at_mid < 0.0 {
            coef.column_mut(n).neg_mut();
        }
    }

    let mut leg = DMatrix::<f64>::zeros(targets.len(), m);
    for (r, &u) in targets.iter().enumerate() {
        let x = 2.0 * u - 1.0;
        let (mut p0, mut p1) = (1.0, x);
        for k in 0..m {
            let pk = match k {
                0 => 1.0,
                1 => x,
                _ => {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                    p2
                }
            };
            // Unit norm on [0, 1]: sqrt(2k + 1) P_k(2u - 1).
            leg[(r, k)] = (2.0 * k as f64 + 1.0).sqrt() * pk;
        }
    }
    Ok(leg * coef)
}

impl<T: Real> SlepianBasis<T> {
    /// Builds the basis on `[0, T]` keeping `d(ΩT) + 8` functions.
    pub fn build(bandwidth: T, interval_length: T, tolerance: T, grid_density: usize) -> Result<Self> {
        let (om, len, eps) = (bandwidth.as_f64(), interval_length.as_f64(), tolerance.as_f64());
        let c = check_args(om, len, eps)?;
        if grid_density < 8 {
            return Err(Error::InvalidArgument(format!("grid density must be at least 8, got {grid_density}")));
        }
        let lam = eigenvalues::<f64>(c)?;
        let n = lam.len();
        let eig_t: DVector<T> = lam.map(|l| T::lit(l));
        let dimension = dimension_from_eigenvalues(&eig_t, tolerance);
        let kept = (dimension + EXTRA_FUNCTIONS).min(n);

        let g = grid_size(c, grid_density);
        let unit_grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
        let mut samples = prolate_functions(std::f64::consts::PI * c, kept, &unit_grid)?;

        // Make the trapezoidal Gram exactly the identity (two Cholesky passes).
        let step = 1.0 / (g - 1) as f64;
        let mut tw = vec![step; g];
        tw[0] *= 0.5;
        tw[g - 1] *= 0.5;
        for _ in 0..2 {
            let mut weighted = samples.clone();
            for (i, mut row) in weighted.row_iter_mut().enumerate() {
                row *= tw[i];
            }
            let gram = samples.transpose() * weighted;
            let chol = nalgebra::Cholesky::new(gram)
                .ok_or_else(|| Error::Numerical(format!("basis Gram on a {g}-point grid is not positive definite")))?;
            let st = chol
                .l()
                .solve_lower_triangular(&samples.transpose())
                .ok_or_else(|| Error::Numerical(format!("singular basis Gram on a {g}-point grid")))?;
            samples = st.transpose();
        }

        let scale = 1.0 / len.sqrt();
        let basis_samples = DMatrix::from_fn(g, kept, |i, k| T::lit(samples[(i, k)] * scale));
        let grid_times = DVector::from_fn(g, |i, _| T::lit(unit_grid[i] * len));
        Ok(SlepianBasis {
            bandwidth,
            interval_length,
            tolerance,
            grid_density,
            grid_times,
            basis_samples,
            eigenvalues: eig_t,
            dimension,
        })
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    pub fn interval_length(&self) -> T {
        self.interval_length
    }

    pub fn tolerance(&self) -> T {
        self.tolerance
    }

    pub fn grid_density(&self) -> usize {
        self.grid_density
    }

    pub fn time_bandwidth(&self) -> T {
        self.bandwidth * self.interval_length
    }

    pub fn grid_times(&self) -> &DVector<T> {
        &self.grid_times
    }

    /// Samples of the kept functions on the uniform grid (grid points × functions).
    pub fn basis_samples(&self) -> &DMatrix<T> {
        &self.basis_samples
    }

    /// Every computed eigenvalue, non-increasing.
    pub fn eigenvalues(&self) -> &DVector<T> {
        &self.eigenvalues
    }

    /// `d(ΩT)` at the construction tolerance.
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn kept(&self) -> usize {
        self.basis_samples.ncols()
    }

    pub fn grid_len(&self) -> usize {
        self.grid_times.len()
    }

    /// Trapezoid weights of the reference grid.
    pub fn trapezoid_weights(&self) -> DVector<T> {
        let g = self.grid_len();
        let h = self.interval_length / T::from_usize_lossy(g - 1);
        let mut w = DVector::from_element(g, h);
        w[0] *= T::lit(0.5);
        w[g - 1] *= T::lit(0.5);
        w
    }

    /// Gram matrix of the stored samples under the trapezoidal rule.
    pub fn trapezoid_gram(&self) -> DMatrix<T> {
        let w = self.trapezoid_weights();
        let mut weighted = self.basis_samples.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= w[i];
        }
        self.basis_samples.transpose() * weighted
    }

    /// Local stencil (first grid index and weights) for time `t`.
    pub fn stencil(&self, t: T) -> Result<(usize, [T; INTERP_ORDER])> {
        let len = self.interval_length;
        let slack = len * T::lit(1e-12);
        if !(t >= -slack && t <= len + slack) {
            return Err(Error::OutOfDomain { time: t.as_f64(), length: len.as_f64() });
        }
        let g = self.grid_len();
        let step = len / T::from_usize_lossy(g - 1);
        let pos = (t / step).as_f64().clamp(0.0, (g - 1) as f64);
        let nearest = pos.round() as usize;
        let mut weights = [T::zero(); INTERP_ORDER];
        if (t - self.grid_times[nearest]).abs() <= T::lit(4.0) * T::default_epsilon() * len {
            let start = nearest.saturating_sub(INTERP_ORDER / 2 - 1).min(g - INTERP_ORDER);
            weights[nearest - start] = T::one();
            return Ok((start, weights));
        }
        let base = pos.floor() as usize;
        let start = base.saturating_sub(INTERP_ORDER / 2 - 1).min(g - INTERP_ORDER);
        let u = T::lit(pos);
        for (j, wj) in weights.iter_mut().enumerate() {
            let mut acc = T::one();
            let xj = T::from_usize_lossy(start + j);
            for i in 0..INTERP_ORDER {
                if i != j {
                    let xi = T::from_usize_lossy(start + i);
                    acc *= (u - xi) / (xj - xi);
                }
            }
            *wj = acc;
        }
        Ok((start, weights))
    }

    /// Values of the functions `indices` at `times` (times × indices).
    pub fn evaluate(&self, indices: &[usize], times: &[T]) -> Result<DMatrix<T>> {
        if let Some(&bad) = indices.iter().find(|&&k| k >= self.kept()) {
            return Err(Error::InvalidArgument(format!(
                "function index {bad} exceeds the {} kept functions",
                self.kept()
            )));
        }
        let mut out = DMatrix::zeros(times.len(), indices.len());
        for (r, &t) in times.iter().enumerate() {
            let (start, w) = self.stencil(t)?;
            for (c, &k) in indices.iter().enumerate() {
                let mut acc = T::zero();
                for (j, &wj) in w.iter().enumerate() {
                    acc += wj * self.basis_samples[(start + j, k)];
                }
                out[(r, c)] = acc;
            }
        }
        Ok(out)
    }

    /// Values of the first `count` functions at `times`.
    pub fn evaluate_leading(&self, count: usize, times: &[T]) -> Result<DMatrix<T>> {
        let idx: Vec<usize> = (0..count).collect();
        self.evaluate(&idx, times)
    }

    /// First `count` eigenfunctions evaluated from their Legendre expansion rather
    /// than the grid. These are the exact eigenpairs of the continuous operator,
    /// orthonormal on `[0, T]` to rounding, at a higher cost per point.
    pub fn evaluate_exact(&self, count: usize, times: &[T]) -> Result<DMatrix<T>> {
        let len = self.interval_length.as_f64();
        let slack = len * 1e-12;
        let mut unit = Vec::with_capacity(times.len());
        for &t in times {
            let t = t.as_f64();
            if !(t >= -slack && t <= len + slack) {
                return Err(Error::OutOfDomain { time: t, length: len });
            }
            unit.push((t / len).clamp(0.0, 1.0));
        }
        let c_rad = std::f64::consts::PI * self.time_bandwidth().as_f64();
        let f = prolate_functions(c_rad, count, &unit)?;
        let scale = 1.0 / len.sqrt();
        Ok(f.map(|v| T::lit(v * scale)))
    }

    /// Writes the binary cache: `Ω, T, ε` (f64), grid density and kept count (i64),
    /// then the eigenvalues and the row-major samples as f64.
    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        for v in [self.bandwidth, self.interval_length, self.tolerance] {
            f.write_all(&v.as_f64().to_le_bytes())?;
        }
        f.write_all(&(self.grid_density as i64).to_le_bytes())?;
        f.write_all(&(self.kept() as i64).to_le_bytes())?;
        for &l in self.eigenvalues.iter() {
            f.write_all(&l.as_f64().to_le_bytes())?;
        }
        for i in 0..self.grid_len() {
            for k in 0..self.kept() {
                f.write_all(&self.basis_samples[(i, k)].as_f64().to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let corrupt = |why: &str| Error::InvalidArgument(format!("corrupt basis cache: {why}"));
        if bytes.len() < 40 || bytes.len() % 8 != 0 {
            return Err(corrupt("truncated header"));
        }
        let word = |i: usize| -> [u8; 8] { bytes[8 * i..8 * i + 8].try_into().expect("8 bytes") };
        let (om, len, eps) =
            (f64::from_le_bytes(word(0)), f64::from_le_bytes(word(1)), f64::from_le_bytes(word(2)));
        let density = i64::from_le_bytes(word(3));
        let kept = i64::from_le_bytes(word(4));
        let c = check_args(om, len, eps)?;
        if density < 8 || kept < 1 {
            return Err(corrupt("bad grid density or function count"));
        }
        let (density, kept) = (density as usize, kept as usize);
        let g = grid_size(c, density);
        let payload = bytes.len() / 8 - 5;
        if payload < g * kept + 1 {
            return Err(corrupt("payload shorter than the sample matrix"));
        }
        let neig = payload - g * kept;
        let eigenvalues = DVector::from_fn(neig, |i, _| T::lit(f64::from_le_bytes(word(5 + i))));
        let base = 5 + neig;
        let basis_samples =
            DMatrix::from_fn(g, kept, |i, k| T::lit(f64::from_le_bytes(word(base + i * kept + k))));
        let grid_times = DVector::from_fn(g, |i, _| T::lit(len * i as f64 / (g - 1) as f64));
        let tolerance = T::lit(eps);
        let dimension = dimension_from_eigenvalues(&eigenvalues, tolerance);
        Ok(SlepianBasis {
            bandwidth: T::lit(om),
            interval_length: T::lit(len),
            tolerance,
            grid_density: density,
            grid_times,
            basis_samples,
            eigenvalues,
            dimension,
        })
    }
}
