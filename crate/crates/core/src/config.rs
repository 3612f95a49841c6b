//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma-separated.
//! Unknown keys, repeated keys and malformed values are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::array::{ArrayGeometry, ArrayScenario, ArrivalAngle};
use crate::error::{Error, Result};
use crate::scenario::Generator;

#[derive(Clone, Debug, PartialEq)]
pub enum GeometrySpec {
    Ula(usize),
    Upa(usize, usize),
    File(PathBuf),
}

/// Angle in degrees plus power relative to the signal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterfererSpec {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub sir_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderSpec {
    None,
    /// Contiguous subarrays of `px × py` elements (py = 1 for a ULA).
    Subarray(usize, usize),
    /// Per-snapshot Slepian encoding with margin `L_1`.
    Spatial(usize),
    SpatioTemporal,
    Random(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub geometry: GeometrySpec,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub interferers: Vec<InterfererSpec>,
    pub snr_db: Vec<f64>,
    pub sir_db: Vec<f64>,
    pub snapshots: usize,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<String>,
    pub encoder: EncoderSpec,
    pub encoder_sizes: Vec<usize>,
    pub buffer: usize,
    pub merge: Vec<usize>,
    pub packets: usize,
    pub tolerance: f64,
    pub grid_density: usize,
    pub taps: Vec<usize>,
    pub margins: Vec<i64>,
    /// Merged-space margins for the merge-accuracy grid (columns; `margins` gives the rows).
    pub merge_margins: Vec<i64>,
    pub delta: f64,
    pub signal: Generator,
    pub mpdr: bool,
    pub time_bandwidth: Vec<f64>,
}

pub const KEYS: &[&str] = &[
    "geometry",
    "carrier_hz",
    "bandwidth_hz",
    "azimuth_deg",
    "elevation_deg",
    "interferers",
    "snr_db",
    "sir_db",
    "snapshots",
    "trials",
    "seed",
    "methods",
    "encoder",
    "encoder_sizes",
    "buffer",
    "merge",
    "packets",
    "tolerance",
    "grid_density",
    "taps",
    "margins",
    "merge_margins",
    "delta",
    "signal",
    "mpdr",
    "time_bandwidth",
];

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            geometry: GeometrySpec::Ula(64),
            carrier_hz: 20e9,
            bandwidth_hz: 5e9,
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            interferers: Vec::new(),
            snr_db: vec![0.0, 10.0, 20.0, 30.0, 40.0],
            sir_db: vec![-30.0],
            snapshots: 32,
            trials: 50,
            seed: 1,
            methods: vec!["ls".into(), "das".into()],
            encoder: EncoderSpec::None,
            encoder_sizes: Vec::new(),
            buffer: 5,
            merge: vec![1],
            packets: 120,
            tolerance: 1e-3,
            grid_density: 16,
            taps: vec![16, 32, 64],
            margins: (0..=8).collect(),
            merge_margins: vec![2, 4, 6, 8],
            delta: 0.0,
            signal: Generator::SumOfSinusoids,
            mpdr: false,
            time_bandwidth: Vec::new(),
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key} = {value:?}: {why}"))
}

fn num<F: std::str::FromStr>(key: &str, v: &str) -> Result<F>
where
    F::Err: std::fmt::Display,
{
    v.trim().parse::<F>().map_err(|e| bad(key, v, e))
}

fn list<F: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<F>>
where
    F::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn parse_geometry(v: &str) -> Result<GeometrySpec> {
    let (kind, arg) = v.split_once(':').ok_or_else(|| bad("geometry", v, "expected ula:M, upa:MXxMY or file:PATH"))?;
    match kind.trim() {
        "ula" => Ok(GeometrySpec::Ula(num("geometry", arg)?)),
        "upa" => {
            let (x, y) = arg.split_once('x').ok_or_else(|| bad("geometry", v, "expected upa:MXxMY"))?;
            Ok(GeometrySpec::Upa(num("geometry", x)?, num("geometry", y)?))
        }
        "file" => Ok(GeometrySpec::File(PathBuf::from(arg.trim()))),
        other => Err(bad("geometry", v, format!("unknown geometry kind {other:?}"))),
    }
}

fn parse_encoder(v: &str) -> Result<EncoderSpec> {
    let v = v.trim();
    let (kind, arg) = v.split_once(':').unwrap_or((v, ""));
    match kind {
        "none" => Ok(EncoderSpec::None),
        "subarray" => {
            let (x, y) = arg.split_once('x').unwrap_or((arg, "1"));
            Ok(EncoderSpec::Subarray(num("encoder", x)?, num("encoder", y)?))
        }
        "spatial" => Ok(EncoderSpec::Spatial(if arg.is_empty() { 0 } else { num("encoder", arg)? })),
        "spatiotemporal" => Ok(EncoderSpec::SpatioTemporal),
        "random" => Ok(EncoderSpec::Random(num("encoder", arg)?)),
        other => Err(bad("encoder", v, format!("unknown encoder {other:?}"))),
    }
}

fn parse_interferers(v: &str) -> Result<Vec<InterfererSpec>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            if parts.len() != 3 {
                return Err(bad("interferers", v, "each entry is azimuth:elevation:sir_db"));
            }
            Ok(InterfererSpec {
                azimuth_deg: num("interferers", parts[0])?,
                elevation_deg: num("interferers", parts[1])?,
                sir_db: num("interferers", parts[2])?,
            })
        })
        .collect()
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if seen.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: key {k:?} repeated", i + 1)));
            }
        }
        let mut c = ScenarioConfig::default();
        for (k, v) in &seen {
            let v = v.as_str();
            match k.as_str() {
                "geometry" => c.geometry = parse_geometry(v)?,
                "carrier_hz" => c.carrier_hz = num(k, v)?,
                "bandwidth_hz" => c.bandwidth_hz = num(k, v)?,
                "azimuth_deg" => c.azimuth_deg = num(k, v)?,
                "elevation_deg" => c.elevation_deg = num(k, v)?,
                "interferers" => c.interferers = parse_interferers(v)?,
                "snr_db" => c.snr_db = list(k, v)?,
                "sir_db" => c.sir_db = list(k, v)?,
                "snapshots" => c.snapshots = num(k, v)?,
                "trials" => c.trials = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                "methods" => c.methods = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                "encoder" => c.encoder = parse_encoder(v)?,
                "encoder_sizes" => c.encoder_sizes = list(k, v)?,
                "buffer" => c.buffer = num(k, v)?,
                "merge" => c.merge = list(k, v)?,
                "packets" => c.packets = num(k, v)?,
                "tolerance" => c.tolerance = num(k, v)?,
                "grid_density" => c.grid_density = num(k, v)?,
                "taps" => c.taps = list(k, v)?,
                "margins" => c.margins = list(k, v)?,
                "merge_margins" => c.merge_margins = list(k, v)?,
                "delta" => c.delta = num(k, v)?,
                "signal" => {
                    c.signal = match v {
                        "tones" | "sum_of_sinusoids" => Generator::SumOfSinusoids,
                        "slepian" | "random_slepian" => Generator::RandomSlepian,
                        _ => return Err(bad(k, v, "expected tones or slepian")),
                    }
                }
                "mpdr" => c.mpdr = num(k, v)?,
                "time_bandwidth" => c.time_bandwidth = list(k, v)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {x}")))
            }
        };
        positive("bandwidth_hz", self.bandwidth_hz)?;
        if !(self.carrier_hz >= 0.0 && self.carrier_hz.is_finite()) {
            return Err(Error::Config(format!("carrier_hz must be non-negative, got {}", self.carrier_hz)));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 0.5) {
            return Err(Error::Config(format!("tolerance must lie in (0, 0.5), got {}", self.tolerance)));
        }
        if self.delta < 0.0 {
            return Err(Error::Config("delta must be non-negative".into()));
        }
        for (name, v) in [("snapshots", self.snapshots), ("trials", self.trials), ("buffer", self.buffer), ("packets", self.packets)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.grid_density < 8 {
            return Err(Error::Config("grid_density must be at least 8".into()));
        }
        if self.taps.contains(&0) || self.merge.contains(&0) {
            return Err(Error::Config("taps and merge entries must be at least 1".into()));
        }
        match &self.geometry {
            GeometrySpec::Ula(0) | GeometrySpec::Upa(0, _) | GeometrySpec::Upa(_, 0) => {
                return Err(Error::Config("array needs at least one element".into()))
            }
            _ => {}
        }
        if let EncoderSpec::Subarray(0, _) | EncoderSpec::Subarray(_, 0) | EncoderSpec::Random(0) = self.encoder {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        let known = ["ls", "das", "subarray", "encoded", "null", "mvdr", "mpdr", "lcmv"];
        if let Some(m) = self.methods.iter().find(|m| !known.contains(&m.as_str())) {
            return Err(Error::Config(format!("unknown method {m:?}; expected one of {known:?}")));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry<f64>> {
        match &self.geometry {
            GeometrySpec::Ula(m) => ArrayGeometry::ula(*m, self.carrier_hz),
            GeometrySpec::Upa(x, y) => ArrayGeometry::upa(*x, *y, self.carrier_hz),
            GeometrySpec::File(p) => ArrayGeometry::from_text_file(p, self.carrier_hz),
        }
    }

    pub fn angle(&self) -> ArrivalAngle<f64> {
        ArrivalAngle::from_degrees(self.azimuth_deg, self.elevation_deg)
    }

    pub fn scenario(&self) -> Result<ArrayScenario<f64>> {
        ArrayScenario::new(self.geometry()?, self.bandwidth_hz, self.angle(), self.snapshots)
    }

    /// Canonical `key = value` rendering, used for the config hash.
    pub fn canonical(&self) -> String {
        format!("{self:?}")
    }
}
