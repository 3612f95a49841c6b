//! Chained least squares over lapped packets, solved online with a bounded
//! backtracking buffer, plus packet merging.
//!
//! Packet `k` owns the core interval `[a_k, a_k + N T_s)`; its functions are
//! Slepian functions of the extended interval `[a_k - η, a_{k+1} + η]` folded
//! into the core, re-orthonormalized, and unfolded with a smooth cutoff. The
//! unfolding is a unitary map, so functions of different packets are orthogonal.
//! Batch `k` is centred on `a_k` and sees only packets `k - 1` and `k`.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::array::ArrayScenario;
use crate::error::{Error, Result};
use crate::scalar::{cis, cre, Real, C};
use crate::slepian::{self, gauss_legendre, prolate_functions};

/// Relative change in `Q_K` below which the recursion counts as converged.
pub const CONVERGENCE: f64 = 1e-12;

/// Most recursion stages stored before giving up on convergence.
pub const MAX_STAGES: usize = 2048;

pub const DEFAULT_BUFFER: usize = 5;
pub const DEFAULT_MERGE: usize = 5;

const QUAD_ORDER: usize = 12;

/// Rising cutoff with `r(s)² + r(-s)² = 1`, zero below `-η` and one above `η`.
pub fn rise(s: f64, eta: f64) -> f64 {
    if eta <= 0.0 {
        return if s > 0.0 {
            1.0
        } else if s < 0.0 {
            0.0
        } else {
            std::f64::consts::FRAC_1_SQRT_2
        };
    }
    if s <= -eta {
        0.0
    } else if s >= eta {
        1.0
    } else {
        let inner = (std::f64::consts::FRAC_PI_2 * s / eta).sin();
        (std::f64::consts::FRAC_PI_4 * (1.0 + inner)).sin()
    }
}

/// Composite Gauss-Legendre rule with panel edges at `breaks`.
pub fn panel_rule(breaks: &[f64], max_len: f64) -> (Vec<f64>, Vec<f64>) {
    let (gx, gw) = gauss_legendre(QUAD_ORDER);
    let mut edges: Vec<f64> = breaks.to_vec();
    edges.sort_by(|a, b| a.partial_cmp(b).expect("finite breaks"));
    edges.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * max_len);
    let (mut x, mut w) = (Vec::new(), Vec::new());
    for pair in edges.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let pieces = ((b - a) / max_len).ceil().max(1.0) as usize;
        let h = (b - a) / pieces as f64;
        for p in 0..pieces {
            let lo = a + h * p as f64;
            for (xi, wi) in gx.iter().zip(&gw) {
                x.push(lo + 0.5 * h * (xi + 1.0));
                w.push(0.5 * h * wi);
            }
        }
    }
    (x, w)
}

/// Folded functions of one packet in local time `u = t - a_k`.
#[derive(Clone, Debug)]
struct Fold {
    core: f64,
    eta: f64,
    c_rad: f64,
    count: usize,
    /// Columns of the orthonormalizing map applied to the folded functions.
    mix: DMatrix<f64>,
}

impl Fold {
    fn ext_len(&self) -> f64 {
        self.core + 2.0 * self.eta
    }

    fn ext(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        let len = self.ext_len();
        let targets: Vec<f64> = u.iter().map(|&v| ((v + self.eta) / len).clamp(0.0, 1.0)).collect();
        Ok(prolate_functions(self.c_rad, self.count, &targets)? / len.sqrt())
    }

    /// Extended functions folded into the core, at `x ∈ [0, core]`.
    fn folded(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        let (core, eta) = (self.core, self.eta);
        let mut second = Vec::with_capacity(xs.len());
        let mut w1 = Vec::with_capacity(xs.len());
        let mut w2 = Vec::with_capacity(xs.len());
        for &x in xs {
            if x < eta {
                w1.push(rise(x, eta));
                second.push(-x);
                w2.push(rise(-x, eta));
            } else if x > core - eta {
                let t = core - x;
                w1.push(rise(t, eta));
                second.push(core + t);
                w2.push(-rise(-t, eta));
            } else {
                w1.push(1.0);
                second.push(x);
                w2.push(0.0);
            }
        }
        let mut g = self.ext(xs)?;
        let g2 = self.ext(&second)?;
        for r in 0..xs.len() {
            for c in 0..self.count {
                g[(r, c)] = w1[r] * g[(r, c)] + w2[r] * g2[(r, c)];
            }
        }
        Ok(g)
    }

    /// Packet functions at local times `us` (zero outside the extended interval).
    fn eval(&self, us: &[f64]) -> Result<DMatrix<f64>> {
        let (core, eta) = (self.core, self.eta);
        let mut xs = Vec::with_capacity(us.len());
        let mut ws = Vec::with_capacity(us.len());
        for &u in us {
            let (x, w) = if u <= -eta || u >= core + eta {
                (0.0, 0.0)
            } else if u < eta {
                (u.abs(), rise(u, eta))
            } else if u > core - eta {
                let s = u - core;
                if s <= 0.0 {
                    (u, rise(-s, eta))
                } else {
                    (core - s, -rise(-s, eta))
                }
            } else {
                (u, 1.0)
            };
            xs.push(x.clamp(0.0, core));
            ws.push(w);
        }
        let mut f = self.folded(&xs)? * &self.mix;
        for (r, w) in ws.iter().enumerate() {
            f.row_mut(r).scale_mut(*w);
        }
        Ok(f)
    }

    /// Folds every well-concentrated extended function, weighted by `√λ`, and
    /// keeps the `count` strongest directions: the `count`-dimensional packet
    /// space holding the most energy of a flat-spectrum process.
    fn new(core: f64, eta: f64, bandwidth: f64, count: usize, sample_interval: f64) -> Result<Self> {
        let ext_len = core + 2.0 * eta;
        let wt = bandwidth * ext_len;
        let lam = slepian::eigenvalues::<f64>(wt)?;
        let pool = lam.iter().take_while(|&&l| l > 1e-14).count().min((2.0 * wt).ceil() as usize + 16);
        if count > pool {
            return Err(Error::InvalidArgument(format!("a packet supports at most {pool} functions, asked for {count}")));
        }
        let c_rad = std::f64::consts::PI * wt;
        let mut fold = Fold { core, eta, c_rad, count: pool, mix: DMatrix::identity(pool, pool) };
        let (x, w) = panel_rule(&[0.0, eta, core - eta, core], sample_interval);
        let mut f = fold.folded(&x)?;
        for (r, wi) in w.iter().enumerate() {
            f.row_mut(r).scale_mut(wi.sqrt());
        }
        let weights = DMatrix::from_diagonal(&DVector::from_iterator(pool, lam.iter().take(pool).map(|l| l.sqrt())));
        let svd = (&f * &weights).svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Numerical("SVD did not return right singular vectors".into()))?;
        let sv = &svd.singular_values;
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).expect("finite singular values"));
        if count == 0 || sv[order[count - 1]] <= 1e-10 * sv[order[0]] {
            return Err(Error::Numerical(format!("{count} folded packet functions are linearly dependent; use fewer functions")));
        }
        let mut mix = DMatrix::zeros(pool, count);
        for (c, &i) in order[..count].iter().enumerate() {
            mix.column_mut(c).copy_from(&(&weights * vt.row(i).transpose() / sv[i]));
        }
        // One Cholesky QR pass removes the rounding left by the SVD.
        let g = &f * &mix;
        let l = (g.transpose() * &g)
            .cholesky()
            .ok_or_else(|| Error::Numerical("folded packet functions lost orthogonality".into()))?;
        let r_inv = l.l().transpose().try_inverse().ok_or_else(|| Error::Numerical("triangular factor is singular".into()))?;
        fold.mix = mix * r_inv;
        Ok(fold)
    }
}

/// Packet functions and the batch blocks `A`, `B`, `E = A^H B` shared by every packet.
#[derive(Clone, Debug)]
pub struct PacketBasis<T: Real> {
    /// Extended support `N T_s + overlap` of one packet.
    pub packet_interval_length: T,
    pub overlap_length: T,
    pub functions_per_packet: usize,
    /// Batch `k` against packet `k` (MN × D).
    pub a_block: DMatrix<C<T>>,
    /// Batch `k` against packet `k - 1`.
    pub b_block: DMatrix<C<T>>,
    pub e_block: DMatrix<C<T>>,
    fold: Fold,
    first_boundary: f64,
    sample_interval: f64,
    bandwidth: f64,
    /// Amplitude scale `√(N T_s)` of each column.
    scale: f64,
}

/// Builds the lapped basis for batches of `scenario.snapshot_count()` snapshots.
///
/// `functions` defaults to `d(ΩT, ε)` over the packet core and `overlap` to
/// the aperture span `T_1(θ)`.
pub fn build_packet_basis<T: Real>(
    scenario: &ArrayScenario<T>,
    functions: Option<usize>,
    overlap: Option<T>,
    tolerance: T,
) -> Result<PacketBasis<T>> {
    let omega = scenario.bandwidth.as_f64();
    let ts = scenario.sample_interval().as_f64();
    let n = scenario.snapshot_count();
    let tau: Vec<f64> = scenario.delays().iter().map(|t| t.as_f64()).collect();
    let m = tau.len();
    let t1 = scenario.span().as_f64();
    let core = n as f64 * ts;
    let slack = 1e-9 * ts;
    let overlap = overlap.map_or(t1, |o| o.as_f64());
    if overlap < t1 - slack {
        return Err(Error::Geometry(format!("overlap {overlap:e} s is shorter than the aperture span {t1:e} s")));
    }
    if overlap > core + slack {
        return Err(Error::Geometry(format!("overlap {overlap:e} s exceeds the packet core {core:e} s")));
    }
    let eta = 0.5 * overlap.min(core);
    let (tmin, tmax) = tau.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    let first_boundary = 0.5 * ((n as f64 - 1.0) * ts - tmin - tmax);
    let local: Vec<f64> = (0..n).flat_map(|k| tau.iter().map(move |&t| k as f64 * ts - t)).map(|t| t - first_boundary).collect();
    let reach = local.iter().fold(0.0f64, |a, &u| a.max(u.abs()));
    if reach > core - eta + slack {
        let needed = scenario.batch_span().as_f64();
        return Err(Error::Geometry(format!(
            "a batch spans {needed:e} s but packets with overlap {overlap:e} s leave only {:e} s; use a larger batch",
            2.0 * (core - eta)
        )));
    }
    let ext_len = core + 2.0 * eta;
    let d = match functions {
        Some(d) => d,
        None => slepian::dimension(omega * core, tolerance.as_f64())?,
    };
    if d == 0 {
        return Err(Error::InvalidArgument("a packet needs at least one function".into()));
    }
    let fold = Fold::new(core, eta, omega, d, ts)?;
    let scale = core.sqrt();
    let two_pi_fc = std::f64::consts::TAU * scenario.geometry.carrier.as_f64();
    let phases: Vec<C<f64>> = (0..n).flat_map(|_| tau.iter().map(|&t| cis(-two_pi_fc * t))).collect();
    let to_block = |vals: DMatrix<f64>| -> DMatrix<C<T>> {
        DMatrix::from_fn(n * m, d, |r, c| {
            let z = phases[r] * (vals[(r, c)] * scale);
            C::new(T::lit(z.re), T::lit(z.im))
        })
    };
    let a_block = to_block(fold.eval(&local)?);
    let shifted: Vec<f64> = local.iter().map(|u| u + core).collect();
    let b_block = to_block(fold.eval(&shifted)?);
    let e_block = a_block.adjoint() * &b_block;
    Ok(PacketBasis {
        packet_interval_length: T::lit(ext_len),
        overlap_length: T::lit(2.0 * eta),
        functions_per_packet: d,
        a_block,
        b_block,
        e_block,
        fold,
        first_boundary,
        sample_interval: ts,
        bandwidth: omega,
        scale,
    })
}

impl<T: Real> PacketBasis<T> {
    pub fn rows(&self) -> usize {
        self.a_block.nrows()
    }

    pub fn core_length(&self) -> f64 {
        self.fold.core
    }

    /// Start `a_k` of packet `k`'s core, in the absolute time of the snapshots.
    pub fn boundary(&self, k: i64) -> f64 {
        self.first_boundary + k as f64 * self.fold.core
    }

    /// Unit-norm packet functions at times `u` relative to the packet's core start.
    pub fn functions_at(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        self.fold.eval(u)
    }

    /// Quadrature nodes and weights over packets `0..packets`, local to packet 0.
    pub fn quadrature(&self, packets: usize) -> (Vec<f64>, Vec<f64>) {
        let (core, eta) = (self.fold.core, self.fold.eta);
        let mut breaks = Vec::new();
        for j in 0..=packets {
            let a = j as f64 * core;
            breaks.extend([a - eta, a, a + eta]);
        }
        panel_rule(&breaks, self.sample_interval)
    }

    /// Same packets seen through a per-batch measurement operator `Φ`.
    pub fn measured(&self, phi: &DMatrix<C<T>>) -> Result<Self> {
        if phi.ncols() != self.rows() {
            return Err(Error::Geometry(format!(
                "measurement operator takes {} samples but a batch has {}; an operator spanning several batches touches more than two packets",
                phi.ncols(),
                self.rows()
            )));
        }
        let a_block = phi * &self.a_block;
        let b_block = phi * &self.b_block;
        let e_block = a_block.adjoint() * &b_block;
        Ok(PacketBasis { a_block, b_block, e_block, ..self.clone() })
    }

    /// `ŝ(t)` from packet estimates `(k, α_k)` at absolute `times`.
    pub fn synthesize(&self, packets: &[(usize, DVector<C<T>>)], times: &[f64]) -> Result<DVector<C<T>>> {
        let mut out = DVector::zeros(times.len());
        let (core, eta) = (self.fold.core, self.fold.eta);
        for (k, alpha) in packets {
            let a = self.boundary(*k as i64);
            let idx: Vec<usize> = (0..times.len()).filter(|&i| times[i] > a - eta && times[i] < a + core + eta).collect();
            if idx.is_empty() {
                continue;
            }
            let local: Vec<f64> = idx.iter().map(|&i| times[i] - a).collect();
            let f = self.fold.eval(&local)?;
            for (r, &i) in idx.iter().enumerate() {
                let mut acc = C::new(T::zero(), T::zero());
                for d in 0..alpha.len() {
                    acc += alpha[d] * T::lit(f[(r, d)] * self.scale);
                }
                out[i] += acc;
            }
        }
        Ok(out)
    }
}

/// One precomputed stage of the recursion.
#[derive(Clone, Debug)]
struct Stage<T: Real> {
    q_inv: DMatrix<C<T>>,
    u: DMatrix<C<T>>,
    /// `(A^H A + δI - E U_K)^{-1}`.
    final_inv: DMatrix<C<T>>,
}

/// The data-independent matrices `Q_K`, `U_K` of the streaming recursion,
/// computed until they stop changing.
#[derive(Clone, Debug)]
pub struct Recursion<T: Real> {
    pub delta: T,
    a_h: DMatrix<C<T>>,
    b_h: DMatrix<C<T>>,
    e: DMatrix<C<T>>,
    stages: Vec<Stage<T>>,
    /// `‖Q_K - Q_{K-1}‖_F` for `K = 1, 2, …`.
    pub q_changes: Vec<T>,
    /// Smallest eigenvalue of `Q_0`.
    pub q0_min_eigenvalue: T,
    pub converged_at: Option<usize>,
}

fn hermitian<T: Real>(m: DMatrix<C<T>>) -> DMatrix<C<T>> {
    (&m + m.adjoint()) * cre(T::lit(0.5))
}

fn pd_inverse<T: Real>(m: DMatrix<C<T>>, what: impl FnOnce() -> String) -> Result<DMatrix<C<T>>> {
    let Some(chol) = m.cholesky() else {
        return Err(Error::Numerical(what()));
    };
    let diag = chol.l_dirty().diagonal().map(|v| v.re);
    if diag.min() <= T::lit(1e-7) * diag.max() {
        return Err(Error::Numerical(what()));
    }
    Ok(chol.inverse())
}

impl<T: Real> Recursion<T> {
    pub fn new(basis: &PacketBasis<T>, delta: T, max_stages: usize) -> Result<Self> {
        if delta < T::zero() {
            return Err(Error::InvalidArgument("ridge δ must be non-negative".into()));
        }
        let d = basis.functions_per_packet;
        let a_h = basis.a_block.adjoint();
        let b_h = basis.b_block.adjoint();
        let e = basis.e_block.clone();
        let ridge = DMatrix::from_diagonal_element(d, d, cre(delta));
        let aha = hermitian(&a_h * &basis.a_block) + &ridge;
        let q0 = hermitian(&aha + &b_h * &basis.b_block);
        let q0_min_eigenvalue = q0.clone().symmetric_eigenvalues().min();
        let norm0 = q0.norm();
        let mut stages: Vec<Stage<T>> = Vec::new();
        let mut q_changes = Vec::new();
        let mut converged_at = None;
        let mut q_prev = q0.clone();
        for k in 0..max_stages.max(1) {
            let q = match stages.last() {
                None => q0.clone(),
                Some(prev) => hermitian(&q0 - &e * &prev.u),
            };
            let q_inv = pd_inverse(q.clone(), || {
                if k == 0 {
                    "Q_0 is singular; use a ridge δ > 0".to_string()
                } else {
                    format!("Q_{k} is not positive definite at step {k}")
                }
            })?;
            let u = &q_inv * e.adjoint();
            let fin = hermitian(&aha - &e * &u);
            let final_inv = pd_inverse(fin, || format!("final normal matrix is not positive definite at step {k}"))?;
            stages.push(Stage { q_inv, u, final_inv });
            if k > 0 {
                let change = (&q - &q_prev).norm();
                q_changes.push(change);
                if change <= T::lit(CONVERGENCE) * norm0 {
                    converged_at = Some(k);
                    break;
                }
            }
            q_prev = q;
        }
        Ok(Recursion { delta, a_h, b_h, e, stages, q_changes, q0_min_eigenvalue, converged_at })
    }

    pub fn dimension(&self) -> usize {
        self.e.nrows()
    }

    fn stage(&self, k: usize) -> Result<&Stage<T>> {
        match self.stages.get(k) {
            Some(s) => Ok(s),
            None if self.converged_at.is_some() => Ok(self.stages.last().expect("at least one stage")),
            None => Err(Error::Numerical(format!(
                "recursion did not converge within {} steps; use a larger ridge δ",
                self.stages.len()
            ))),
        }
    }

    /// `U_K` (steady state beyond convergence).
    pub fn u(&self, k: usize) -> Result<DMatrix<C<T>>> {
        Ok(self.stage(k)?.u.clone())
    }
}

/// Matrix-vector products performed by one stream step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    /// Products with `A^H` or `B^H` (D × MN).
    pub wide: usize,
    /// Products with D × D matrices.
    pub square: usize,
}

/// Online solver state for one stream.
#[derive(Clone, Debug)]
pub struct PacketStream<T: Real> {
    recursion: Arc<Recursion<T>>,
    buffer: Option<usize>,
    /// Index `K` of the newest `v_K`; the newest packet is `K + 1`.
    k: usize,
    ahy_last: DVector<C<T>>,
    /// `v_ℓ` for the packets still in the buffer window, ending at `v_K`.
    v: VecDeque<DVector<C<T>>>,
    v_first: usize,
    estimates: VecDeque<DVector<C<T>>>,
    first: usize,
    finalized: VecDeque<(usize, DVector<C<T>>)>,
    pub last_ops: OpCount,
}

impl<T: Real> PacketStream<T> {
    /// Consumes the first two batches; `buffer = None` keeps every packet live.
    pub fn start(
        recursion: Arc<Recursion<T>>,
        y0: &DVector<C<T>>,
        y1: &DVector<C<T>>,
        buffer: Option<usize>,
    ) -> Result<Self> {
        if buffer == Some(0) {
            return Err(Error::InvalidArgument("buffer length must be at least one".into()));
        }
        let rows = recursion.a_h.ncols();
        for y in [y0, y1] {
            if y.len() != rows {
                return Err(Error::InvalidArgument(format!("batch has {} samples, expected {rows}", y.len())));
            }
        }
        let st = recursion.stage(0)?;
        let v0 = &st.q_inv * (&recursion.a_h * y0 + &recursion.b_h * y1);
        let ahy = &recursion.a_h * y1;
        let newest = &st.final_inv * (&ahy - &recursion.e * &v0);
        let oldest = &v0 - &st.u * &newest;
        let mut s = PacketStream {
            buffer,
            k: 0,
            ahy_last: ahy,
            v: VecDeque::from([v0]),
            v_first: 0,
            estimates: VecDeque::from([oldest, newest]),
            first: 0,
            finalized: VecDeque::new(),
            last_ops: OpCount { wide: 3, square: 4 },
            recursion,
        };
        s.trim();
        Ok(s)
    }

    fn trim(&mut self) {
        if let Some(b) = self.buffer {
            while self.estimates.len() > b {
                let e = self.estimates.pop_front().expect("non-empty buffer");
                self.finalized.push_back((self.first, e));
                self.first += 1;
            }
            // Backtracking uses v_ℓ for ℓ ≥ first; the recursion needs v_K.
            while self.v.len() > 1 && self.v_first < self.first {
                self.v.pop_front();
                self.v_first += 1;
            }
        }
    }

    /// Consumes batch `K + 1` and updates the buffered estimates.
    pub fn step(&mut self, y: &DVector<C<T>>) -> Result<()> {
        let rec = Arc::clone(&self.recursion);
        if y.len() != rec.a_h.ncols() {
            return Err(Error::InvalidArgument(format!("batch has {} samples, expected {}", y.len(), rec.a_h.ncols())));
        }
        let k = self.k + 1;
        let st = rec.stage(k)?;
        let mut ops = OpCount::default();
        let v_prev = self.v.back().expect("v_K is always kept");
        let rhs = &self.ahy_last + &rec.b_h * y - &rec.e * v_prev;
        let v_k = &st.q_inv * rhs;
        let ahy = &rec.a_h * y;
        let newest = &st.final_inv * (&ahy - &rec.e * &v_k);
        ops.wide += 2;
        ops.square += 4;
        self.v.push_back(v_k);
        self.estimates.push_back(newest);
        self.ahy_last = ahy;
        self.k = k;
        self.trim();
        // Backtrack α_ℓ = v_ℓ - U_ℓ α_{ℓ+1} over the live window, newest first.
        let newest_idx = k + 1;
        let mut l = k;
        while l >= self.first && l >= self.v_first {
            let u = &rec.stage(l)?.u;
            let next = &self.estimates[l + 1 - self.first];
            let updated = &self.v[l - self.v_first] - u * next;
            self.estimates[l - self.first] = updated;
            ops.square += 1;
            if l == 0 {
                break;
            }
            l -= 1;
        }
        debug_assert_eq!(self.first + self.estimates.len(), newest_idx + 1);
        self.last_ops = ops;
        Ok(())
    }

    /// Index of the newest packet.
    pub fn newest(&self) -> usize {
        self.k + 1
    }

    /// Live estimates, oldest first, with the index of the first.
    pub fn live(&self) -> (usize, Vec<DVector<C<T>>>) {
        (self.first, self.estimates.iter().cloned().collect())
    }

    /// Estimates that have left the buffer since the last call.
    pub fn take_finalized(&mut self) -> Vec<(usize, DVector<C<T>>)> {
        self.finalized.drain(..).collect()
    }

    /// Every remaining estimate, finalized or live, in packet order.
    pub fn finish(mut self) -> Vec<(usize, DVector<C<T>>)> {
        let mut out = self.take_finalized();
        let first = self.first;
        out.extend(self.estimates.into_iter().enumerate().map(|(i, e)| (first + i, e)));
        out
    }
}

/// Starts a stream, computing the recursion matrices on the way.
pub fn stream_init<T: Real>(
    basis: &PacketBasis<T>,
    y0: &DVector<C<T>>,
    y1: &DVector<C<T>>,
    delta: T,
    buffer: Option<usize>,
) -> Result<PacketStream<T>> {
    let rec = Arc::new(Recursion::new(basis, delta, MAX_STAGES)?);
    PacketStream::start(rec, y0, y1, buffer)
}

pub fn stream_step<T: Real>(state: &mut PacketStream<T>, y: &DVector<C<T>>) -> Result<()> {
    state.step(y)
}

/// Measurement-domain step: the stream must have been started on
/// `basis.measured(Φ)`; `w = Φ y`.
pub fn stream_step_measured<T: Real>(state: &mut PacketStream<T>, w: &DVector<C<T>>) -> Result<()> {
    state.step(w)
}

/// Projection of `B'` consecutive packets onto one longer lapped packet
/// covering their cores, folded with the same overlap.
#[derive(Clone, Debug)]
pub struct MergeOperator<T: Real> {
    pub packets: usize,
    pub merged_dim: usize,
    /// `⟨ψ'_j, ψ_{k,d}⟩`, merged functions × stacked packet functions.
    pub projection: DMatrix<C<T>>,
    fold: Option<Fold>,
    scale: f64,
}

/// `⌈2ΩT⌉` over the union of `packets` cores.
pub fn merged_base_dimension<T: Real>(basis: &PacketBasis<T>, packets: usize) -> usize {
    (2.0 * basis.bandwidth * packets as f64 * basis.fold.core - 1e-9).ceil() as usize
}

/// `d(ΩT, ε)` over the union of `packets` cores.
pub fn default_merged_dimension<T: Real>(basis: &PacketBasis<T>, packets: usize, tolerance: f64) -> Result<usize> {
    slepian::dimension(basis.bandwidth * packets as f64 * basis.fold.core, tolerance)
}

impl<T: Real> MergeOperator<T> {
    pub fn new(basis: &PacketBasis<T>, packets: usize, merged_dim: usize) -> Result<Self> {
        if packets == 0 {
            return Err(Error::InvalidArgument("merge needs at least one packet".into()));
        }
        let d = basis.functions_per_packet;
        if packets == 1 {
            return Ok(MergeOperator { packets, merged_dim: d, projection: DMatrix::identity(d, d), fold: None, scale: basis.scale });
        }
        if merged_dim == 0 {
            return Err(Error::InvalidArgument("merged dimension must be positive".into()));
        }
        let core = packets as f64 * basis.fold.core;
        let fold = Fold::new(core, basis.fold.eta, basis.bandwidth, merged_dim, basis.sample_interval)?;
        let (x, w) = basis.quadrature(packets);
        let mut weighted = fold.eval(&x)?;
        for (r, wi) in w.iter().enumerate() {
            weighted.row_mut(r).scale_mut(*wi);
        }
        let proj = weighted.transpose() * stacked_functions(basis, packets, &x)?;
        Ok(MergeOperator { packets, merged_dim, projection: proj.map(|v| cre(T::lit(v))), fold: Some(fold), scale: basis.scale })
    }

    /// Merged unit-norm functions at times local to the first packet's core.
    pub fn merged_functions(&self, basis: &PacketBasis<T>, u: &[f64]) -> Result<DMatrix<f64>> {
        match &self.fold {
            Some(f) => f.eval(u),
            None => basis.fold.eval(u),
        }
    }

    /// Merged signal at absolute `times` for a group whose first packet is `first`.
    pub fn synthesize(&self, basis: &PacketBasis<T>, first: usize, merged: &DVector<C<T>>, times: &[f64]) -> Result<DVector<C<T>>> {
        let a = basis.boundary(first as i64);
        let local: Vec<f64> = times.iter().map(|t| t - a).collect();
        let f = self.merged_functions(basis, &local)?;
        Ok(DVector::from_fn(times.len(), |r, _| {
            (0..self.merged_dim).fold(C::new(T::zero(), T::zero()), |acc, j| acc + merged[j] * T::lit(f[(r, j)] * self.scale))
        }))
    }
}

/// Packet functions of packets `0..packets` side by side (nodes × packets·D).
fn stacked_functions<T: Real>(basis: &PacketBasis<T>, packets: usize, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = basis.functions_per_packet;
    let mut out = DMatrix::zeros(x.len(), packets * d);
    for j in 0..packets {
        let shift = j as f64 * basis.fold.core;
        let local: Vec<f64> = x.iter().map(|v| v - shift).collect();
        out.columns_mut(j * d, d).copy_from(&basis.fold.eval(&local)?);
    }
    Ok(out)
}

/// Projects the `B'` finalized packet estimates onto the merged space.
pub fn merge_packets<T: Real>(op: &MergeOperator<T>, blocks: &[DVector<C<T>>]) -> Result<DVector<C<T>>> {
    if blocks.len() != op.packets {
        return Err(Error::InvalidArgument(format!("merge expects {} packets, got {}", op.packets, blocks.len())));
    }
    let d = op.projection.ncols() / op.packets;
    let mut stacked = DVector::zeros(op.projection.ncols());
    for (j, b) in blocks.iter().enumerate() {
        if b.len() != d {
            return Err(Error::InvalidArgument(format!("packet {j} has {} coefficients, expected {d}", b.len())));
        }
        stacked.rows_mut(j * d, d).copy_from(b);
    }
    Ok(&op.projection * stacked)
}

/// Low-rank form of the merge in packet coordinates: `y ↦ y - L L^H y`.
#[derive(Clone, Debug)]
pub struct LowRankMerge<T: Real> {
    pub update: DMatrix<C<T>>,
    /// Eigenvalues of `G` (squared cosines of the principal angles), descending.
    pub cosines: DVector<T>,
}

/// `L` from the eigenvectors of `G = M^H M` with the `dim S - dim S'` smallest eigenvalues.
pub fn low_rank_merge<T: Real>(op: &MergeOperator<T>) -> LowRankMerge<T> {
    let m = &op.projection;
    let g = hermitian(m.adjoint() * m);
    let n = g.nrows();
    let rank = n.saturating_sub(m.nrows());
    let eig = g.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).expect("finite eigenvalues"));
    let update = eig.eigenvectors.select_columns(order[..rank].iter());
    let cosines = DVector::from_iterator(n, order.iter().rev().map(|&i| eig.eigenvalues[i]));
    LowRankMerge { update, cosines }
}

pub fn merge_low_rank<T: Real>(l: &DMatrix<C<T>>, y: &DVector<C<T>>) -> DVector<C<T>> {
    y - l * (l.adjoint() * y)
}

fn orthonormal_columns(mut a: DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    for (r, wi) in w.iter().enumerate() {
        a.row_mut(r).scale_mut(wi.sqrt());
    }
    a.qr().q()
}

/// `‖P_{S'} P_S - (P_S - L L^H P_S)‖_F / ‖P_{S'} P_S‖_F` from orthonormal bases of `S` and `S'`.
fn low_rank_error(vs: &DMatrix<f64>, vp: &DMatrix<f64>) -> f64 {
    let m = vp.transpose() * vs;
    let g = m.transpose() * &m;
    let n = g.nrows();
    let rank = n.saturating_sub(vp.ncols());
    let eig = g.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).expect("finite eigenvalues"));
    let wc = eig.eigenvectors.select_columns(order[rank..].iter());
    let approx = vs * &wc * wc.transpose();
    let exact = vp * &m;
    (exact.clone() - approx).norm() / exact.norm()
}

/// Low-rank merge error for packets that are plain Slepian spaces of
/// consecutive batch spans `[k N T_s, k N T_s + T_N]`, whose union is
/// orthonormalized, merged onto the Slepian space of the whole span.
pub fn overlapping_merge_error<T: Real>(scenario: &ArrayScenario<T>, packets: usize, packet_dim: usize, merged_dim: usize) -> Result<f64> {
    if packets == 0 || packet_dim == 0 || merged_dim == 0 {
        return Err(Error::InvalidArgument("packet count and dimensions must be positive".into()));
    }
    let omega = scenario.bandwidth.as_f64();
    let ts = scenario.sample_interval().as_f64();
    let step = scenario.snapshot_count() as f64 * ts;
    let tn = scenario.batch_span().as_f64();
    let total = tn + (packets - 1) as f64 * step;
    let mut breaks = vec![0.0, total];
    for k in 0..packets {
        breaks.extend([k as f64 * step, k as f64 * step + tn]);
    }
    let (x, w) = panel_rule(&breaks, ts);
    let c_packet = std::f64::consts::PI * omega * tn;
    let mut stacked = DMatrix::zeros(x.len(), packets * packet_dim);
    for k in 0..packets {
        let a = k as f64 * step;
        let idx: Vec<usize> = (0..x.len()).filter(|&i| x[i] >= a && x[i] <= a + tn).collect();
        let targets: Vec<f64> = idx.iter().map(|&i| ((x[i] - a) / tn).clamp(0.0, 1.0)).collect();
        let f = prolate_functions(c_packet, packet_dim, &targets)?;
        for (r, &i) in idx.iter().enumerate() {
            for d in 0..packet_dim {
                stacked[(i, k * packet_dim + d)] = f[(r, d)] / tn.sqrt();
            }
        }
    }
    let targets: Vec<f64> = x.iter().map(|v| v / total).collect();
    let merged = prolate_functions(std::f64::consts::PI * omega * total, merged_dim, &targets)? / total.sqrt();
    Ok(low_rank_error(&orthonormal_columns(stacked, &w), &orthonormal_columns(merged, &w)))
}

/// Reads records of `rows` interleaved little-endian complex64 values.
pub fn read_complex64_batches(path: impl AsRef<Path>, rows: usize) -> Result<Vec<DVector<C<f64>>>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let record = rows * 8;
    if rows == 0 || bytes.len() % record != 0 {
        return Err(Error::InvalidArgument(format!("stream file length {} is not a multiple of {record}-byte records", bytes.len())));
    }
    let f = |i: usize| f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
    Ok((0..bytes.len() / record).map(|b| DVector::from_fn(rows, |r, _| {
        let i = 2 * (b * rows + r);
        C::new(f(i), f(i + 1))
    })).collect())
}

pub fn write_complex64_batches(path: impl AsRef<Path>, batches: &[DVector<C<f64>>]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for b in batches {
        for z in b.iter() {
            f.write_all(&(z.re as f32).to_le_bytes())?;
            f.write_all(&(z.im as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}
