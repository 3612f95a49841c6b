//! Array geometry, propagation delays and snapshot timing.

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::slepian;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Element positions (meters, relative to the phase center) and carrier.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayGeometry<T: Real> {
    pub element_positions: Vec<[T; 3]>,
    pub carrier: T,
    pub propagation_speed: T,
}

/// Arrival direction in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArrivalAngle<T: Real> {
    pub azimuth: T,
    pub elevation: T,
}

/// Snapshot times `t_1 < … < t_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan<T: Real> {
    pub snapshot_times: DVector<T>,
    pub sample_interval: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Narrowband,
    Broadband,
}

/// Geometry, band and look direction of one beamforming problem.
#[derive(Clone, Debug)]
pub struct ArrayScenario<T: Real> {
    pub geometry: ArrayGeometry<T>,
    pub bandwidth: T,
    pub angle: ArrivalAngle<T>,
    pub plan: SamplingPlan<T>,
}

impl<T: Real> ArrivalAngle<T> {
    pub fn new(azimuth: T, elevation: T) -> Self {
        ArrivalAngle { azimuth, elevation }
    }

    pub fn from_degrees(azimuth: T, elevation: T) -> Self {
        let k = T::pi() / T::lit(180.0);
        ArrivalAngle { azimuth: azimuth * k, elevation: elevation * k }
    }

    /// Unit propagation direction `[cos φ cos ϕ, sin φ cos ϕ, sin ϕ]`.
    pub fn direction(&self) -> [T; 3] {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [ca * ce, sa * ce, se]
    }
}

impl<T: Real> ArrayGeometry<T> {
    pub fn new(element_positions: Vec<[T; 3]>, carrier: T) -> Result<Self> {
        Self::with_speed(element_positions, carrier, T::lit(SPEED_OF_LIGHT))
    }

    pub fn with_speed(element_positions: Vec<[T; 3]>, carrier: T, propagation_speed: T) -> Result<Self> {
        if element_positions.is_empty() {
            return Err(Error::InvalidArgument("array needs at least one element".into()));
        }
        if element_positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("element positions must be finite".into()));
        }
        if !(carrier >= T::zero()) || !carrier.is_finite() {
            return Err(Error::InvalidArgument("carrier must be non-negative".into()));
        }
        if !(propagation_speed > T::zero()) {
            return Err(Error::InvalidArgument("propagation speed must be positive".into()));
        }
        Ok(ArrayGeometry { element_positions, carrier, propagation_speed })
    }

    /// Half-wavelength uniform linear array along the x axis, centered on the origin.
    pub fn ula(m: usize, carrier: T) -> Result<Self> {
        let d = T::lit(SPEED_OF_LIGHT) / (T::lit(2.0) * carrier);
        let mid = T::from_usize_lossy(m.saturating_sub(1)) / T::lit(2.0);
        let pos = (0..m).map(|i| [(T::from_usize_lossy(i) - mid) * d, T::zero(), T::zero()]).collect();
        Self::new(pos, carrier)
    }

    /// Half-wavelength `mx × my` planar array in the z = 0 plane, centered on the origin.
    pub fn upa(mx: usize, my: usize, carrier: T) -> Result<Self> {
        let d = T::lit(SPEED_OF_LIGHT) / (T::lit(2.0) * carrier);
        let cx = T::from_usize_lossy(mx.saturating_sub(1)) / T::lit(2.0);
        let cy = T::from_usize_lossy(my.saturating_sub(1)) / T::lit(2.0);
        let mut pos = Vec::with_capacity(mx * my);
        for iy in 0..my {
            for ix in 0..mx {
                pos.push([(T::from_usize_lossy(ix) - cx) * d, (T::from_usize_lossy(iy) - cy) * d, T::zero()]);
            }
        }
        Self::new(pos, carrier)
    }

    /// Reads one element per line as three whitespace- or comma-separated floats.
    pub fn from_text_file(path: impl AsRef<Path>, carrier: T) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read geometry {}: {e}", path.as_ref().display())))?;
        Self::new(parse_positions(&text)?, carrier)
    }

    pub fn element_count(&self) -> usize {
        self.element_positions.len()
    }

    /// Scales every position by `k`.
    pub fn scaled(&self, k: T) -> Self {
        let pos = self.element_positions.iter().map(|p| [p[0] * k, p[1] * k, p[2] * k]).collect();
        ArrayGeometry { element_positions: pos, ..self.clone() }
    }

    /// `τ_m = p_m · ϑ(θ) / c`.
    pub fn delays(&self, angle: &ArrivalAngle<T>) -> DVector<T> {
        let v = angle.direction();
        DVector::from_iterator(
            self.element_count(),
            self.element_positions
                .iter()
                .map(|p| (p[0] * v[0] + p[1] * v[1] + p[2] * v[2]) / self.propagation_speed),
        )
    }

    /// Temporal extent `T_1(θ) = max τ_m - min τ_m` of one snapshot.
    pub fn aperture_span(&self, angle: &ArrivalAngle<T>) -> T {
        let tau = self.delays(angle);
        tau.max() - tau.min()
    }
}

fn parse_positions<T: Real>(text: &str) -> Result<Vec<[T; 3]>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("geometry line {}: {e}", line_no + 1)))?;
        if vals.len() != 3 {
            return Err(Error::Config(format!("geometry line {} has {} values, expected 3", line_no + 1, vals.len())));
        }
        out.push([T::lit(vals[0]), T::lit(vals[1]), T::lit(vals[2])]);
    }
    Ok(out)
}

/// Classifies the regime; broadband iff `2ΩT_1 ≥ 1`. Also returns `2ΩT_1`.
pub fn regime<T: Real>(bandwidth: T, span: T) -> (Regime, T) {
    let p = T::lit(2.0) * bandwidth * span;
    (if p >= T::one() { Regime::Broadband } else { Regime::Narrowband }, p)
}

impl<T: Real> SamplingPlan<T> {
    /// `n` snapshots at `t_k = k T_s`, `T_s = 1/(2Ω)`.
    pub fn nyquist(n: usize, bandwidth: T) -> Self {
        let ts = T::one() / (T::lit(2.0) * bandwidth);
        SamplingPlan { snapshot_times: DVector::from_fn(n, |k, _| T::from_usize_lossy(k) * ts), sample_interval: ts }
    }

    pub fn new(snapshot_times: DVector<T>, sample_interval: T) -> Result<Self> {
        if snapshot_times.is_empty() {
            return Err(Error::InvalidArgument("sampling plan needs at least one snapshot".into()));
        }
        if snapshot_times.as_slice().windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("snapshot times must be strictly increasing".into()));
        }
        Ok(SamplingPlan { snapshot_times, sample_interval })
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshot_times.len()
    }

    pub fn duration(&self) -> T {
        self.snapshot_times[self.snapshot_count() - 1] - self.snapshot_times[0]
    }
}

/// Margin `L` in `D_N = ⌈2ΩT_1⌉ + L + N - 1`.
pub fn margin<T: Real>(d_n: usize, bandwidth: T, span: T, n: usize) -> i64 {
    let base = (T::lit(2.0) * bandwidth * span).as_f64().ceil() as i64;
    d_n as i64 - base - n as i64 + 1
}

/// `D_N(θ) = d(Ω T_N(θ))`, with `T_N = T_1 + (N - 1)/(2Ω)`.
pub fn representation_dim<T: Real>(
    geometry: &ArrayGeometry<T>,
    angle: &ArrivalAngle<T>,
    bandwidth: T,
    n: usize,
    tolerance: T,
) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidArgument("snapshot count must be at least one".into()));
    }
    let ts = T::one() / (T::lit(2.0) * bandwidth);
    let tn = geometry.aperture_span(angle) + T::from_usize_lossy(n - 1) * ts;
    let c = (bandwidth * tn).as_f64();
    if c <= 1e-12 {
        return Ok(1);
    }
    slepian::dimension(c, tolerance.as_f64())
}

impl<T: Real> ArrayScenario<T> {
    pub fn new(geometry: ArrayGeometry<T>, bandwidth: T, angle: ArrivalAngle<T>, snapshots: usize) -> Result<Self> {
        if !(bandwidth > T::zero()) {
            return Err(Error::InvalidArgument("bandwidth must be positive".into()));
        }
        if snapshots == 0 {
            return Err(Error::InvalidArgument("snapshot count must be at least one".into()));
        }
        Ok(ArrayScenario { plan: SamplingPlan::nyquist(snapshots, bandwidth), geometry, bandwidth, angle })
    }

    pub fn with_angle(&self, angle: ArrivalAngle<T>) -> Self {
        ArrayScenario { angle, ..self.clone() }
    }

    /// Same geometry and look direction with `n` Nyquist snapshots.
    pub fn with_n_snapshots(&self, n: usize) -> Result<Self> {
        ArrayScenario::new(self.geometry.clone(), self.bandwidth, self.angle, n)
    }

    pub fn element_count(&self) -> usize {
        self.geometry.element_count()
    }

    pub fn snapshot_count(&self) -> usize {
        self.plan.snapshot_count()
    }

    pub fn sample_interval(&self) -> T {
        self.plan.sample_interval
    }

    pub fn delays(&self) -> DVector<T> {
        self.geometry.delays(&self.angle)
    }

    pub fn span(&self) -> T {
        self.geometry.aperture_span(&self.angle)
    }

    /// `T_N(θ) = T_1(θ) + (t_N - t_1)`.
    pub fn batch_span(&self) -> T {
        self.span() + self.plan.duration()
    }

    pub fn regime(&self) -> (Regime, T) {
        regime(self.bandwidth, self.span())
    }

    pub fn representation_dim(&self, tolerance: T) -> Result<usize> {
        representation_dim(&self.geometry, &self.angle, self.bandwidth, self.snapshot_count(), tolerance)
    }

    pub fn margin(&self, d_n: usize) -> i64 {
        margin(d_n, self.bandwidth, self.span(), self.snapshot_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_positions_with_comments() {
        let p: Vec<[f64; 3]> = parse_positions("# header\n0 0 0\n1.5, 2, -1\n\n").unwrap();
        assert_eq!(p, vec![[0.0, 0.0, 0.0], [1.5, 2.0, -1.0]]);
        assert!(parse_positions::<f64>("1 2\n").is_err());
    }
}
