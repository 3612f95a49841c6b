//! Dimensionality-reducing measurement operators `Φ` and the encoded least-squares solve.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{ComplexField, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::array::ArrayScenario;
use crate::batch::{regularized_pinv, CONDITION_LIMIT};
use crate::error::{Error, Result};
use crate::scalar::{cis, cre, Real, C};
use crate::scenario::trial_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    Subarray,
    SpatialBlock,
    SpatioTemporal,
    Random,
}

impl Structure {
    fn code(self) -> f64 {
        match self {
            Structure::Subarray => 1.0,
            Structure::SpatialBlock => 2.0,
            Structure::SpatioTemporal => 3.0,
            Structure::Random => 4.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        match c as i64 {
            1 => Some(Structure::Subarray),
            2 => Some(Structure::SpatialBlock),
            3 => Some(Structure::SpatioTemporal),
            4 => Some(Structure::Random),
            _ => None,
        }
    }
}

/// `P × MN` operator applied to the stacked samples (`w = Φ y`).
#[derive(Clone, Debug)]
pub struct Encoder<T: Real> {
    pub matrix: DMatrix<C<T>>,
    pub structure: Structure,
    /// Rows per snapshot block, for block-diagonal structures.
    pub block_layout: Option<Vec<usize>>,
}

impl<T: Real> Encoder<T> {
    pub fn measurements(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, y: &DVector<C<T>>) -> Result<DVector<C<T>>> {
        if y.len() != self.matrix.ncols() {
            return Err(Error::InvalidArgument(format!("encoder takes {} samples, got {}", self.matrix.ncols(), y.len())));
        }
        Ok(&self.matrix * y)
    }

    /// True if `P` is below the model dimension, where recovery may fail.
    pub fn undersampled(&self, dimension: usize) -> bool {
        self.measurements() < dimension
    }

    /// Writes `structure, snapshot blocks, 0` (f64), `P, MN` (i64), then the
    /// row-major matrix as interleaved real/imaginary f64 pairs.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        let blocks = self.block_layout.as_ref().map_or(0, |b| b.len());
        for v in [self.structure.code(), blocks as f64, 0.0] {
            f.write_all(&v.to_le_bytes())?;
        }
        f.write_all(&(self.matrix.nrows() as i64).to_le_bytes())?;
        f.write_all(&(self.matrix.ncols() as i64).to_le_bytes())?;
        for i in 0..self.matrix.nrows() {
            for j in 0..self.matrix.ncols() {
                let z = self.matrix[(i, j)];
                f.write_all(&z.re.as_f64().to_le_bytes())?;
                f.write_all(&z.im.as_f64().to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let corrupt = |why: &str| Error::InvalidArgument(format!("corrupt encoder file: {why}"));
        if bytes.len() < 40 || bytes.len() % 8 != 0 {
            return Err(corrupt("truncated header"));
        }
        let word = |i: usize| -> [u8; 8] { bytes[8 * i..8 * i + 8].try_into().expect("8 bytes") };
        let structure = Structure::from_code(f64::from_le_bytes(word(0))).ok_or_else(|| corrupt("unknown structure"))?;
        let blocks = f64::from_le_bytes(word(1)) as usize;
        let (p, cols) = (i64::from_le_bytes(word(3)), i64::from_le_bytes(word(4)));
        if p < 1 || cols < 1 {
            return Err(corrupt("bad matrix shape"));
        }
        let (p, cols) = (p as usize, cols as usize);
        if bytes.len() / 8 - 5 != 2 * p * cols {
            return Err(corrupt("payload does not match the matrix shape"));
        }
        let matrix = DMatrix::from_fn(p, cols, |i, j| {
            let k = 5 + 2 * (i * cols + j);
            C::new(T::lit(f64::from_le_bytes(word(k))), T::lit(f64::from_le_bytes(word(k + 1))))
        });
        let block_layout = if blocks > 0 {
            if p % blocks != 0 {
                return Err(corrupt("rows do not split into equal snapshot blocks"));
            }
            Some(vec![p / blocks; blocks])
        } else {
            None
        };
        Ok(Encoder { matrix, structure, block_layout })
    }
}

fn block_diagonal<T: Real>(block: &DMatrix<C<T>>, snapshots: usize) -> DMatrix<C<T>> {
    let (p, m) = block.shape();
    let mut phi = DMatrix::zeros(p * snapshots, m * snapshots);
    for n in 0..snapshots {
        phi.view_mut((n * p, n * m), (p, m)).copy_from(block);
    }
    phi
}

/// Subarray sums: row `m'` of each snapshot block carries `weights[m]` on the
/// elements of subarray `m'`, normalized to unit row norm.
pub fn make_subarray_encoder<T: Real>(partition: &[Vec<usize>], weights: &DVector<C<T>>, snapshots: usize) -> Result<Encoder<T>> {
    let m = weights.len();
    let mut owner = vec![None; m];
    for (g, set) in partition.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::InvalidArgument(format!("subarray {g} is empty")));
        }
        for &e in set {
            if e >= m {
                return Err(Error::InvalidArgument(format!("element {e} is outside the {m}-element array")));
            }
            if let Some(prev) = owner[e] {
                return Err(Error::InvalidArgument(format!("element {e} belongs to subarrays {prev} and {g}")));
            }
            owner[e] = Some(g);
        }
    }
    if let Some(e) = owner.iter().position(Option::is_none) {
        return Err(Error::InvalidArgument(format!("element {e} is in no subarray")));
    }
    let mut block = DMatrix::zeros(partition.len(), m);
    for (g, set) in partition.iter().enumerate() {
        let norm = set.iter().fold(T::zero(), |a, &e| a + weights[e].norm_sqr()).sqrt();
        if !(norm > T::zero()) {
            return Err(Error::InvalidArgument(format!("subarray {g} has all-zero weights")));
        }
        for &e in set {
            block[(g, e)] = weights[e] / cre(norm);
        }
    }
    Ok(Encoder {
        matrix: block_diagonal(&block, snapshots),
        structure: Structure::Subarray,
        block_layout: Some(vec![partition.len(); snapshots]),
    })
}

/// Phase-alignment weights `e^{+j2πf_c τ_m}`.
pub fn steering_weights<T: Real>(scenario: &ArrayScenario<T>) -> DVector<C<T>> {
    let two_pi_fc = T::two_pi() * scenario.geometry.carrier;
    scenario.delays().map(|t| cis(two_pi_fc * t))
}

/// Contiguous groups of `size` elements of a linear array.
pub fn linear_partition(elements: usize, size: usize) -> Result<Vec<Vec<usize>>> {
    if size == 0 || elements % size != 0 {
        return Err(Error::InvalidArgument(format!("{elements} elements do not split into groups of {size}")));
    }
    Ok((0..elements / size).map(|g| (g * size..(g + 1) * size).collect()).collect())
}

/// `px × py` tiles of an `mx × my` planar array indexed `iy·mx + ix`.
pub fn planar_partition(mx: usize, my: usize, px: usize, py: usize) -> Result<Vec<Vec<usize>>> {
    if px == 0 || py == 0 || mx % px != 0 || my % py != 0 {
        return Err(Error::InvalidArgument(format!("{mx}×{my} array does not tile into {px}×{py} subarrays")));
    }
    let mut parts = Vec::new();
    for ty in 0..my / py {
        for tx in 0..mx / px {
            let mut set = Vec::with_capacity(px * py);
            for iy in ty * py..(ty + 1) * py {
                for ix in tx * px..(tx + 1) * px {
                    set.push(iy * mx + ix);
                }
            }
            parts.push(set);
        }
    }
    Ok(parts)
}

/// Block-diagonal `Φ` with `U^H` on every snapshot.
pub fn make_spatial_slepian_encoder<T: Real>(u: &DMatrix<C<T>>, snapshots: usize) -> Result<Encoder<T>> {
    let (m, d1) = u.shape();
    if d1 > m {
        return Err(Error::InsufficientElements { needed: d1, available: m });
    }
    let gram = u.adjoint() * u;
    let dev = (gram - DMatrix::identity(d1, d1)).iter().fold(T::zero(), |a, z| a.max(z.modulus()));
    if dev > T::lit(1e-6) {
        return Err(Error::InvalidArgument("per-snapshot basis must have orthonormal columns".into()));
    }
    Ok(Encoder { matrix: block_diagonal(&u.adjoint(), snapshots), structure: Structure::SpatialBlock, block_layout: Some(vec![d1; snapshots]) })
}

#[derive(Clone, Debug)]
pub enum SpatioTemporalMode<T: Real> {
    Pinv,
    Adjoint,
    Weights(DMatrix<C<T>>),
}

pub fn make_spatiotemporal_encoder<T: Real>(a: &DMatrix<C<T>>, mode: SpatioTemporalMode<T>) -> Result<Encoder<T>> {
    let matrix = match mode {
        SpatioTemporalMode::Pinv => regularized_pinv(a, T::zero())?.0,
        SpatioTemporalMode::Adjoint => a.adjoint(),
        SpatioTemporalMode::Weights(w) => {
            if w.ncols() != a.nrows() {
                return Err(Error::InvalidArgument(format!("weights take {} samples, model has {}", w.ncols(), a.nrows())));
            }
            w
        }
    };
    Ok(Encoder { matrix, structure: Structure::SpatioTemporal, block_layout: None })
}

/// Dense complex Gaussian `Φ` (`P × columns`), each part of variance `1/(2P)`.
pub fn make_random_encoder<T: Real>(p: usize, columns: usize, seed: u64) -> Result<Encoder<T>> {
    if p == 0 || p > columns {
        return Err(Error::InvalidArgument(format!("random encoder needs 1 ≤ P ≤ {columns}, got {p}")));
    }
    let mut rng = trial_rng(seed, 0);
    let scale = (0.5 / p as f64).sqrt();
    let mut draw = || -> T {
        let x: f64 = StandardNormal.sample(&mut rng);
        T::lit(x * scale)
    };
    let matrix = DMatrix::from_fn(p, columns, |_, _| C::new(draw(), draw()));
    Ok(Encoder { matrix, structure: Structure::Random, block_layout: None })
}

#[derive(Clone, Debug)]
pub struct EncodedSolution<T: Real> {
    pub coefficients: DVector<C<T>>,
    pub condition: T,
    /// Set when `ΦA` is rank deficient and the minimum-norm solution was returned.
    pub rank_deficient: bool,
}

/// Minimizes `½‖w - ΦAα‖² + δ‖α‖²` through the SVD of `ΦA`.
pub fn encoded_ls<T: Real>(phi: &DMatrix<C<T>>, a: &DMatrix<C<T>>, w: &DVector<C<T>>, delta: T) -> Result<EncodedSolution<T>> {
    if phi.ncols() != a.nrows() || w.len() != phi.nrows() {
        return Err(Error::InvalidArgument(format!(
            "shapes disagree: Φ is {}×{}, A is {}×{}, w has {}",
            phi.nrows(),
            phi.ncols(),
            a.nrows(),
            a.ncols(),
            w.len()
        )));
    }
    if delta < T::zero() {
        return Err(Error::InvalidArgument("ridge δ must be non-negative".into()));
    }
    let psi = phi * a;
    let (pinv, condition) = regularized_pinv(&psi, T::lit(2.0) * delta)?;
    let rank_deficient = psi.nrows() < psi.ncols() || condition.as_f64() > CONDITION_LIMIT;
    Ok(EncodedSolution { coefficients: pinv * w, condition, rank_deficient })
}

/// `trace(Ψ^† Φ Φ^H Ψ^{†H})` with `Ψ = ΦA`.
pub fn variance_multiplier<T: Real>(phi: &DMatrix<C<T>>, a: &DMatrix<C<T>>) -> Result<T> {
    if phi.ncols() != a.nrows() {
        return Err(Error::InvalidArgument("Φ columns must match the rows of A".into()));
    }
    let psi = phi * a;
    let (pinv, condition) = regularized_pinv(&psi, T::zero())?;
    if psi.nrows() < psi.ncols() || condition.as_f64() > CONDITION_LIMIT {
        return Err(Error::Numerical(format!("encoded model is rank deficient (condition {:e})", condition.as_f64())));
    }
    Ok((pinv * phi).norm_squared())
}
