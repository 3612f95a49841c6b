//! Seeded Monte-Carlo drivers behind the command-line verbs.
//!
//! Trial `t` draws its signals from `trial_rng(seed, t)` and its noise from
//! numbered streams of the same generator, so results do not depend on the
//! number of worker threads. Rows come back in trial order.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adaptive::{build_covariance, lcmv_weights, mvdr_weights, null_projector, Source};
use crate::array::{ArrayScenario, ArrivalAngle, SamplingPlan};
use crate::batch::{delay_and_sum, regularized_pinv, snapshot_subspace, LeastSquares, SnapshotBatch};
use crate::config::{EncoderSpec, GeometrySpec, ScenarioConfig};
use crate::diagnostics::{beamformed_snr, ideal_gain, mean_std, model_gain, nulling_bias, variance_multiplier, ExactModel};
use crate::encodings::{
    self, linear_partition, make_random_encoder, make_spatial_slepian_encoder, make_spatiotemporal_encoder,
    make_subarray_encoder, planar_partition, steering_weights, SpatioTemporalMode,
};
use crate::error::{Error, Result};
use crate::forward::{build_synthesis, scaled_samples, scenario_basis, scenario_model, ForwardModel};
use crate::scalar::C;
use crate::scenario::{db_to_power, noise_batch, source_samples, trial_rng, TestSignal};
use crate::slepian;
use crate::streaming::{
    build_packet_basis, default_merged_dimension, merge_packets, overlapping_merge_error, MergeOperator, PacketBasis,
    PacketStream, Recursion, MAX_STAGES,
};

type Cx = C<f64>;

/// Packets dropped at each end of a stream before measuring SNR.
pub const EDGE_PACKETS: usize = 5;

/// Ridge used by `streaming` when the configured `delta` is zero; the newest
/// packet is seen by a single batch and needs it.
pub const STREAM_RIDGE: f64 = 1e-6;

/// Nominal SNR of the SIR sweep.
pub const SIR_SWEEP_SNR_DB: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verb {
    Dims,
    Conventional,
    Adaptive,
    Streaming,
    Encode,
    Diag,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Dims => "dims",
            Verb::Conventional => "conventional",
            Verb::Adaptive => "adaptive",
            Verb::Streaming => "streaming",
            Verb::Encode => "encode",
            Verb::Diag => "diag",
        }
    }
}

/// One method on one trial at one operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub method: String,
    /// Method parameters, e.g. `R=32` or `B'=5`.
    pub setting: String,
    pub trial: usize,
    pub nominal_snr_db: f64,
    pub sir_db: Option<f64>,
    pub snr_db: f64,
    pub gain_db: f64,
}

/// Mean and spread over trials of one `(method, setting, SNR, SIR)` group.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub setting: String,
    pub nominal_snr_db: f64,
    pub sir_db: Option<f64>,
    pub trials: usize,
    pub mean_snr_db: f64,
    pub std_snr_db: f64,
    pub mean_gain_db: f64,
    pub std_gain_db: f64,
    pub ideal_gain_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
    Flag(bool),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(v) => f.write_str(v),
            Cell::Flag(v) => write!(f, "{v}"),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Flag(v)
    }
}

/// A named table with a fixed header.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.into(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Column index by header name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric view of column `name`.
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        let Some(c) = self.column(name) else { return Vec::new() };
        self.rows
            .iter()
            .map(|r| match &r[c] {
                Cell::Int(v) => *v as f64,
                Cell::Num(v) => *v,
                Cell::Flag(v) => f64::from(u8::from(*v)),
                Cell::Text(_) => f64::NAN,
            })
            .collect()
    }
}

impl TrialRow {
    pub const HEADER: [&'static str; 7] = ["method", "setting", "trial", "nominal_snr_db", "sir_db", "snr_db", "gain_db"];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.setting.clone(),
            self.trial.to_string(),
            self.nominal_snr_db.to_string(),
            self.sir_db.map(|v| v.to_string()).unwrap_or_default(),
            self.snr_db.to_string(),
            self.gain_db.to_string(),
        ]
    }
}

impl Aggregate {
    pub const HEADER: [&'static str; 10] = [
        "method",
        "setting",
        "nominal_snr_db",
        "sir_db",
        "trials",
        "mean_snr_db",
        "std_snr_db",
        "mean_gain_db",
        "std_gain_db",
        "ideal_gain_db",
    ];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.setting.clone(),
            self.nominal_snr_db.to_string(),
            self.sir_db.map(|v| v.to_string()).unwrap_or_default(),
            self.trials.to_string(),
            self.mean_snr_db.to_string(),
            self.std_snr_db.to_string(),
            self.mean_gain_db.to_string(),
            self.std_gain_db.to_string(),
            self.ideal_gain_db.to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub verb: Verb,
    pub trials: Vec<TrialRow>,
    pub aggregates: Vec<Aggregate>,
    pub tables: Vec<Table>,
}

impl ExperimentResult {
    fn new(verb: Verb) -> Self {
        ExperimentResult { verb, trials: Vec::new(), aggregates: Vec::new(), tables: Vec::new() }
    }

    fn with_trials(verb: Verb, trials: Vec<TrialRow>, elements: usize) -> Self {
        let aggregates = aggregate(&trials, elements);
        ExperimentResult { verb, trials, aggregates, tables: Vec::new() }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Aggregate for a method and setting at a nominal SNR (and SIR, if given).
    pub fn find(&self, method: &str, setting: &str, snr_db: f64, sir_db: Option<f64>) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| {
            a.method == method
                && a.setting == setting
                && a.nominal_snr_db == snr_db
                && (sir_db.is_none() || a.sir_db == sir_db)
        })
    }
}

/// Groups rows by `(method, setting, SNR, SIR)` in order of first appearance.
pub fn aggregate(rows: &[TrialRow], elements: usize) -> Vec<Aggregate> {
    let mut keys: Vec<(String, String, f64, Option<f64>)> = Vec::new();
    let mut groups: Vec<Vec<&TrialRow>> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.setting.clone(), r.nominal_snr_db, r.sir_db);
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(r),
            None => {
                keys.push(key);
                groups.push(vec![r]);
            }
        }
    }
    keys.into_iter()
        .zip(groups)
        .map(|((method, setting, nominal_snr_db, sir_db), g)| {
            let snr: Vec<f64> = g.iter().map(|r| r.snr_db).collect();
            let gain: Vec<f64> = g.iter().map(|r| r.gain_db).collect();
            let (mean_snr_db, std_snr_db) = mean_std(&snr);
            let (mean_gain_db, std_gain_db) = mean_std(&gain);
            Aggregate {
                method,
                setting,
                nominal_snr_db,
                sir_db,
                trials: g.len(),
                mean_snr_db,
                std_snr_db,
                mean_gain_db,
                std_gain_db,
                ideal_gain_db: ideal_gain(elements),
            }
        })
        .collect()
}

pub fn run(verb: Verb, cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    match verb {
        Verb::Dims => dims(cfg),
        Verb::Conventional => conventional(cfg),
        Verb::Adaptive => adaptive(cfg),
        Verb::Streaming => streaming(cfg),
        Verb::Encode => encode(cfg),
        Verb::Diag => diag(cfg),
    }
}

fn signal_seeds(seed: u64, trial: usize, count: usize) -> Vec<u64> {
    let mut rng = trial_rng(seed, trial as u64);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Noise generator for operating point `point` of a trial.
fn noise_rng(seed: u64, trial: usize, point: usize) -> ChaCha8Rng {
    let mut rng = trial_rng(seed, trial as u64);
    rng.set_stream(point as u64 + 1);
    rng
}

fn par_trials<F>(trials: usize, f: F) -> Result<Vec<TrialRow>>
where
    F: Fn(usize) -> Result<Vec<TrialRow>> + Sync + Send,
{
    let per: Vec<Vec<TrialRow>> = (0..trials).into_par_iter().map(f).collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

fn row(method: &str, setting: &str, trial: usize, snr: f64, sir: Option<f64>, est: &DVector<Cx>, truth: &DVector<Cx>) -> Result<TrialRow> {
    let snr_db = beamformed_snr(est, truth)?;
    Ok(TrialRow {
        method: method.into(),
        setting: setting.into(),
        trial,
        nominal_snr_db: snr,
        sir_db: sir,
        snr_db,
        gain_db: snr_db - snr,
    })
}

fn stacked(y: &DMatrix<Cx>) -> DVector<Cx> {
    DVector::from_column_slice(y.as_slice())
}

/// The scenario with `guard` extra snapshots on each side of the batch.
fn extended(s: &ArrayScenario<f64>, guard: usize) -> Result<ArrayScenario<f64>> {
    let ts = s.sample_interval();
    let t0 = s.plan.snapshot_times[0];
    let n = s.snapshot_count() + 2 * guard;
    let times = DVector::from_fn(n, |i, _| t0 + (i as f64 - guard as f64) * ts);
    let mut e = s.clone();
    e.plan = SamplingPlan::new(times, ts)?;
    Ok(e)
}

/// `Ψ (ΦA)^† Φ`: encoded least squares composed with synthesis.
fn encoded_weights(phi: &DMatrix<Cx>, model: &ForwardModel<f64>, psi: &DMatrix<Cx>, delta: f64) -> Result<DMatrix<Cx>> {
    let (pinv, _) = regularized_pinv(&(phi * &model.stacked_matrix), 2.0 * delta)?;
    Ok(psi * pinv * phi)
}

fn subarray_shape(cfg: &ScenarioConfig) -> (usize, usize) {
    match (&cfg.encoder, &cfg.geometry) {
        (EncoderSpec::Subarray(px, py), _) => (*px, *py),
        (_, GeometrySpec::Upa(..)) => (2, 2),
        _ => (4, 1),
    }
}

fn subarray_matrix(cfg: &ScenarioConfig, s: &ArrayScenario<f64>, px: usize, py: usize) -> Result<DMatrix<Cx>> {
    let partition = match cfg.geometry {
        GeometrySpec::Upa(mx, my) => planar_partition(mx, my, px, py)?,
        _ => {
            if py != 1 {
                return Err(Error::Config(format!("subarray {px}x{py} needs a planar array")));
            }
            linear_partition(s.element_count(), px)?
        }
    };
    Ok(make_subarray_encoder(&partition, &steering_weights(s), s.snapshot_count())?.matrix)
}

/// An encoder instance: label, size parameter and matrix.
struct EncoderCase {
    label: String,
    parameter: usize,
    matrix: DMatrix<Cx>,
}

fn encoder_cases(cfg: &ScenarioConfig, s: &ArrayScenario<f64>, model: &ForwardModel<f64>) -> Result<Vec<EncoderCase>> {
    let sizes = |default: usize| if cfg.encoder_sizes.is_empty() { vec![default] } else { cfg.encoder_sizes.clone() };
    let n = s.snapshot_count();
    let mut out = Vec::new();
    match cfg.encoder {
        EncoderSpec::None => return Err(Error::Config("no encoder configured; set encoder = spatial:L1, random:P, subarray:PX or spatiotemporal".into())),
        EncoderSpec::Spatial(l1) => {
            for l in sizes(l1) {
                let u = snapshot_subspace(s, l, cfg.grid_density)?;
                out.push(EncoderCase { label: format!("spatial:L1={l}"), parameter: l, matrix: make_spatial_slepian_encoder(&u, n)?.matrix });
            }
        }
        EncoderSpec::SpatioTemporal => {
            let enc = make_spatiotemporal_encoder(&model.stacked_matrix, SpatioTemporalMode::Pinv)?;
            out.push(EncoderCase { label: "spatiotemporal".into(), parameter: enc.measurements(), matrix: enc.matrix });
        }
        EncoderSpec::Random(p) => {
            for p in sizes(p) {
                let enc = make_random_encoder(p, model.rows(), cfg.seed)?;
                out.push(EncoderCase { label: format!("random:P={p}"), parameter: p, matrix: enc.matrix });
            }
        }
        EncoderSpec::Subarray(px, py) => {
            for p in sizes(px) {
                let py = if py == 1 { 1 } else { p };
                out.push(EncoderCase { label: format!("subarray:{p}x{py}"), parameter: p, matrix: subarray_matrix(cfg, s, p, py)? });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// dims

/// What a regime asserts about `d(ΩT)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    Exactly(usize),
    /// `d ≤ ⌈2ΩT⌉ + k`.
    AtMost(usize),
    /// `d ≥ ⌈2ΩT⌉ + k`.
    AtLeast(usize),
}

impl Bound {
    pub fn holds(self, time_bandwidth: f64, d: usize) -> bool {
        let base = (2.0 * time_bandwidth).ceil() as usize;
        match self {
            Bound::Exactly(k) => d == k,
            Bound::AtMost(k) => d <= base + k,
            Bound::AtLeast(k) => d >= base + k,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Exactly(k) => write!(f, "d = {k}"),
            Bound::AtMost(k) => write!(f, "d <= ceil(2WT) + {k}"),
            Bound::AtLeast(k) => write!(f, "d >= ceil(2WT) + {k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DimensionRegime {
    pub tolerance: f64,
    /// Lower end; `None` means the open end at zero.
    pub low: Option<f64>,
    pub high: f64,
    pub bound: Bound,
}

impl DimensionRegime {
    /// Twenty evenly spaced probes covering the regime, endpoints included.
    pub fn probes(&self) -> Vec<f64> {
        match self.low {
            Some(lo) => (0..20).map(|i| lo + (self.high - lo) * i as f64 / 19.0).collect(),
            None => (1..=20).map(|i| self.high * i as f64 / 20.0).collect(),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x <= self.high && self.low.map_or(x > 0.0, |lo| x >= lo)
    }
}

/// Tabulated dimension regimes for `ε = 1e-3` and `ε = 1e-4`.
pub fn dimension_regimes(tolerance: f64) -> Vec<DimensionRegime> {
    let r = |low: Option<f64>, high: f64, bound: Bound| DimensionRegime { tolerance, low, high, bound };
    if tolerance == 1e-3 {
        vec![
            r(Some(0.001), 0.031, Bound::Exactly(1)),
            r(Some(0.032), 0.268, Bound::Exactly(2)),
            r(Some(0.001), 3.4, Bound::AtMost(2)),
            r(Some(3.4), 200.0, Bound::AtMost(3)),
            r(Some(0.32), 200.0, Bound::AtLeast(1)),
        ]
    } else if tolerance == 1e-4 {
        vec![
            r(None, 0.009, Bound::Exactly(1)),
            r(Some(0.010), 0.151, Bound::Exactly(2)),
            r(Some(0.152), 0.439, Bound::Exactly(3)),
            r(Some(0.001), 3.0, Bound::AtMost(3)),
            r(Some(3.0), 200.0, Bound::AtMost(4)),
            r(Some(1.0), 200.0, Bound::AtLeast(3)),
        ]
    } else {
        Vec::new()
    }
}

const DIMS_HEADER: [&str; 5] = ["tolerance", "time_bandwidth", "dimension", "regime", "holds"];

/// Probes every tabulated regime at `tolerance`; one row per probe.
pub fn regime_table(tolerance: f64) -> Result<Table> {
    let mut t = Table::new("dims", &DIMS_HEADER);
    for reg in dimension_regimes(tolerance) {
        for x in reg.probes() {
            let d = slepian::dimension(x, tolerance)?;
            t.push(vec![tolerance.into(), x.into(), d.into(), reg.bound.to_string().into(), reg.bound.holds(x, d).into()]);
        }
    }
    Ok(t)
}

/// `d(ΩT)` for the configured `time_bandwidth` list, or the regime probes if it is empty.
pub fn dims(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    let mut res = ExperimentResult::new(Verb::Dims);
    if cfg.time_bandwidth.is_empty() {
        if dimension_regimes(cfg.tolerance).is_empty() {
            return Err(Error::Config("dims without time_bandwidth probes needs tolerance 1e-3 or 1e-4".into()));
        }
        res.tables.push(regime_table(cfg.tolerance)?);
        return Ok(res);
    }
    let mut t = Table::new("dims", &DIMS_HEADER);
    let regimes = dimension_regimes(cfg.tolerance);
    for &x in &cfg.time_bandwidth {
        if !(x > 0.0) {
            return Err(Error::Config(format!("time_bandwidth entries must be positive, got {x}")));
        }
        let d = slepian::dimension(x, cfg.tolerance)?;
        let hits: Vec<&DimensionRegime> = regimes.iter().filter(|r| r.contains(x)).collect();
        let label = hits.iter().map(|r| r.bound.to_string()).collect::<Vec<_>>().join("; ");
        let holds = hits.iter().all(|r| r.bound.holds(x, d));
        t.push(vec![cfg.tolerance.into(), x.into(), d.into(), label.into(), holds.into()]);
    }
    res.tables.push(t);
    Ok(res)
}

// ---------------------------------------------------------------------------
// conventional

fn model_table(s: &ArrayScenario<f64>, d: usize) -> Table {
    let (m, n) = (s.element_count(), s.snapshot_count());
    let mut t = Table::new("model", &["elements", "snapshots", "dimension", "margin", "model_gain_db", "ideal_gain_db"]);
    t.push(vec![m.into(), n.into(), d.into(), s.margin(d).into(), model_gain(m, n, d).into(), ideal_gain(m).into()]);
    t
}

/// Slepian least squares against delay-and-sum and subarray processing over the SNR sweep.
pub fn conventional(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    let s = cfg.scenario()?;
    let (m, n) = (s.element_count(), s.snapshot_count());
    let (basis, model) = scenario_model(&s, cfg.tolerance, cfg.grid_density, None)?;
    let d = model.dimension();
    let psi = build_synthesis(&basis, model.output_offsets.as_slice(), d)?;
    let mut linear: Vec<(String, String, DMatrix<Cx>)> = Vec::new();
    let mut taps: Vec<usize> = Vec::new();
    for method in &cfg.methods {
        match method.as_str() {
            "ls" => linear.push(("ls".into(), format!("D={d}"), LeastSquares::new(&model, cfg.delta, "")?.composite_weights(&psi))),
            "das" => taps.extend(cfg.taps.iter().copied()),
            "subarray" => {
                let (px, py) = subarray_shape(cfg);
                let phi = subarray_matrix(cfg, &s, px, py)?;
                linear.push(("subarray".into(), format!("{px}x{py}"), encoded_weights(&phi, &model, &psi, cfg.delta)?));
            }
            "encoded" => {
                for case in encoder_cases(cfg, &s, &model)? {
                    linear.push(("encoded".into(), case.label, encoded_weights(&case.matrix, &model, &psi, cfg.delta)?));
                }
            }
            other => return Err(Error::Config(format!("{other:?} is not a conventional method (ls, das, subarray, encoded)"))),
        }
    }
    let reach = s.delays().iter().fold(0.0f64, |a, t| a.max(t.abs())) / s.sample_interval();
    let guard = if taps.is_empty() { 0 } else { taps.iter().max().copied().unwrap_or(0) / 2 + reach.ceil() as usize + 1 };
    let ext = extended(&s, guard)?;
    let rows = par_trials(cfg.trials, |t| {
        let seeds = signal_seeds(cfg.seed, t, 1);
        let sig = TestSignal::for_scenario(cfg.signal, &ext, seeds[0])?;
        let clean = source_samples(&sig, &ext, &ext.angle)?;
        let truth = DVector::from_vec(sig.evaluate(s.plan.snapshot_times.as_slice())?);
        let mut out = Vec::new();
        for (i, &snr) in cfg.snr_db.iter().enumerate() {
            let y_ext = &clean + noise_batch(&mut noise_rng(cfg.seed, t, i), m, n + 2 * guard, db_to_power(-snr));
            let y = stacked(&y_ext.columns(guard, n).into_owned());
            for (method, setting, w) in &linear {
                out.push(row(method, setting, t, snr, None, &(w * &y), &truth)?);
            }
            if !taps.is_empty() {
                let batch = SnapshotBatch::new(y_ext, ext.plan.snapshot_times.clone())?;
                for &r in &taps {
                    let est = delay_and_sum(&batch, &ext, r)?.rows(guard, n).into_owned();
                    out.push(row("das", &format!("R={r}"), t, snr, None, &est, &truth)?);
                }
            }
        }
        Ok(out)
    })?;
    let mut res = ExperimentResult::with_trials(Verb::Conventional, rows, m);
    res.tables.push(model_table(&s, d));
    Ok(res)
}

// ---------------------------------------------------------------------------
// adaptive

/// `(sweep, nominal SNR, SIR override)` operating points.
fn adaptive_points(cfg: &ScenarioConfig) -> Vec<(&'static str, f64, Option<f64>)> {
    let sir0 = cfg.sir_db.first().copied();
    let mut pts: Vec<_> = cfg.snr_db.iter().map(|&snr| ("snr", snr, sir0)).collect();
    if cfg.sir_db.len() > 1 {
        pts.extend(cfg.sir_db.iter().map(|&sir| ("sir", SIR_SWEEP_SNR_DB, Some(sir))));
    }
    pts
}

/// Nulling, MVDR/MPDR and LCMV against plain least squares, swept over SNR at
/// the first SIR and over SIR at 30 dB SNR.
pub fn adaptive(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    if cfg.interferers.is_empty() {
        return Err(Error::Config("adaptive needs at least one interferer".into()));
    }
    let s = cfg.scenario()?;
    let (m, n) = (s.element_count(), s.snapshot_count());
    let (basis, model) = scenario_model(&s, cfg.tolerance, cfg.grid_density, None)?;
    let a = &model.stacked_matrix;
    let d = model.dimension();
    let psi = build_synthesis(&basis, model.output_offsets.as_slice(), d)?;
    let adaptive_methods = ["ls", "null", "mvdr", "mpdr", "lcmv"];
    let mut methods: Vec<&str> = cfg.methods.iter().map(String::as_str).filter(|m| adaptive_methods.contains(m)).collect();
    if methods.iter().all(|&m| m == "ls") {
        methods = vec!["ls", "null", "mvdr", "lcmv"];
        if cfg.mpdr {
            methods.push("mpdr");
        }
    }
    let angles: Vec<ArrivalAngle<f64>> = cfg.interferers.iter().map(|i| ArrivalAngle::from_degrees(i.azimuth_deg, i.elevation_deg)).collect();
    let interferer_models: Vec<DMatrix<Cx>> = angles
        .iter()
        .map(|&ang| Ok(scenario_model(&s.with_angle(ang), cfg.tolerance, cfg.grid_density, None)?.1.stacked_matrix))
        .collect::<Result<_>>()?;
    let ls = LeastSquares::new(&model, cfg.delta, "")?.composite_weights(&psi);
    let nulling = if methods.contains(&"null") {
        let all = DMatrix::from_columns(&interferer_models.iter().flat_map(|x| x.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>());
        let proj = null_projector(&all)?;
        let (pinv, _) = regularized_pinv(a, 2.0 * cfg.delta)?;
        Some(&psi * pinv * &proj.projector)
    } else {
        None
    };
    let points = adaptive_points(cfg);
    let sirs_for = |over: Option<f64>| -> Vec<f64> { cfg.interferers.iter().map(|i| over.unwrap_or(i.sir_db)).collect() };
    // Weights per operating point, methods in configured order.
    let mut weights: Vec<Vec<(String, DMatrix<Cx>)>> = Vec::new();
    for &(_, snr, over) in &points {
        let noise = db_to_power(-snr);
        let sources: Vec<Source<f64>> =
            angles.iter().zip(sirs_for(over)).map(|(&angle, sir)| Source { angle, power: db_to_power(-sir) }).collect();
        let mut ws = Vec::new();
        for &method in &methods {
            let w = match method {
                "ls" => ls.clone(),
                "null" => nulling.clone().expect("built when requested"),
                "mvdr" | "mpdr" => {
                    let signal = (method == "mpdr").then_some(1.0);
                    let cov = build_covariance(&s, &sources, noise, signal, cfg.tolerance, cfg.grid_density)?;
                    &psi * mvdr_weights(a, &cov)?.weights
                }
                "lcmv" => {
                    let cov = build_covariance(&s, &sources, noise, None, cfg.tolerance, cfg.grid_density)?;
                    let cons: Vec<_> = interferer_models.iter().map(|f| (f.clone(), DMatrix::zeros(d, f.ncols()))).collect();
                    &psi * lcmv_weights(a, &cov, &cons)?.weights
                }
                _ => unreachable!("filtered above"),
            };
            ws.push((method.to_string(), w));
        }
        weights.push(ws);
    }
    let rows = par_trials(cfg.trials, |t| {
        let seeds = signal_seeds(cfg.seed, t, 1 + angles.len());
        let sig = TestSignal::for_scenario(cfg.signal, &s, seeds[0])?;
        let look = source_samples(&sig, &s, &s.angle)?;
        let truth = DVector::from_vec(sig.evaluate(s.plan.snapshot_times.as_slice())?);
        let parts: Vec<DMatrix<Cx>> = angles
            .iter()
            .zip(&seeds[1..])
            .map(|(ang, &sd)| {
                let si = s.with_angle(*ang);
                source_samples(&TestSignal::for_scenario(cfg.signal, &si, sd)?, &s, ang)
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::new();
        for (i, (&(sweep, snr, over), ws)) in points.iter().zip(&weights).enumerate() {
            let mut y = look.clone() + noise_batch(&mut noise_rng(cfg.seed, t, i), m, n, db_to_power(-snr));
            for (p, sir) in parts.iter().zip(sirs_for(over)) {
                y += p * Cx::new(db_to_power(-sir).sqrt(), 0.0);
            }
            let y = stacked(&y);
            let sir_col = over.or(cfg.interferers.first().map(|i| i.sir_db));
            for (method, w) in ws {
                out.push(row(method, &format!("{sweep}-sweep"), t, snr, sir_col, &(w * &y), &truth)?);
            }
        }
        Ok(out)
    })?;
    let mut res = ExperimentResult::with_trials(Verb::Adaptive, rows, m);
    res.tables.push(model_table(&s, d));
    Ok(res)
}

// ---------------------------------------------------------------------------
// streaming

/// Synthesis rows for a window of snapshots around one packet group,
/// identical for every group because snapshots and packets share a period.
struct PeriodicSynthesis {
    /// Snapshot offset of the first row relative to the group's first snapshot.
    first: i64,
    rows: DMatrix<Cx>,
}

impl PeriodicSynthesis {
    fn new(f: impl Fn(&[f64]) -> Result<DMatrix<f64>>, s: &ArrayScenario<f64>, basis: &PacketBasis<f64>, packets: usize) -> Result<Self> {
        let n = s.snapshot_count() as i64;
        let ts = s.sample_interval();
        let t0 = s.plan.snapshot_times[0];
        let first = -n;
        let count = (packets as i64 + 2) * n;
        let local: Vec<f64> = (0..count).map(|j| t0 + (first + j) as f64 * ts - basis.boundary(0)).collect();
        let scale = basis.core_length().sqrt();
        let rows = f(&local)?.map(|v| Cx::new(v * scale, 0.0));
        Ok(PeriodicSynthesis { first, rows })
    }

    /// Adds the group starting at packet `k` into `out`, which holds snapshots `lo..lo + out.len()`.
    fn add(&self, out: &mut DVector<Cx>, lo: usize, k: usize, n: usize, coef: &DVector<Cx>) {
        let vals = &self.rows * coef;
        for (r, v) in vals.iter().enumerate() {
            let idx = (k * n) as i64 + self.first + r as i64 - lo as i64;
            if idx >= 0 && (idx as usize) < out.len() {
                out[idx as usize] += *v;
            }
        }
    }
}

struct StreamCase {
    method: &'static str,
    merge: usize,
    basis: PacketBasis<f64>,
    recursion: Arc<Recursion<f64>>,
    phi: Option<DMatrix<Cx>>,
    op: MergeOperator<f64>,
    single: PeriodicSynthesis,
    merged: PeriodicSynthesis,
}

/// Streams `packets` batches through the lapped solver, with and without
/// packet merging, and measures SNR away from the ends of the record.
pub fn streaming(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    let s = cfg.scenario()?;
    let (m, n) = (s.element_count(), s.snapshot_count());
    let k_total = cfg.packets;
    if k_total < 2 {
        return Err(Error::Config("streaming needs at least two packets".into()));
    }
    let basis = build_packet_basis(&s, None, None, cfg.tolerance)?;
    let mut variants: Vec<(&'static str, PacketBasis<f64>, Option<DMatrix<Cx>>)> = vec![("streaming", basis.clone(), None)];
    if let EncoderSpec::Spatial(l1) = cfg.encoder {
        let u = snapshot_subspace(&s, l1, cfg.grid_density)?;
        let phi = make_spatial_slepian_encoder(&u, n)?.matrix;
        variants.push(("measured", basis.measured(&phi)?, Some(phi)));
    }
    let single = |b: &PacketBasis<f64>| PeriodicSynthesis::new(|u| b.functions_at(u), &s, b, 1);
    let mut cases = Vec::new();
    for (method, b, phi) in variants {
        let delta = if cfg.delta > 0.0 { cfg.delta } else { STREAM_RIDGE };
        let recursion = Arc::new(Recursion::new(&b, delta, MAX_STAGES)?);
        for &bm in &cfg.merge {
            let dim = if bm == 1 { b.functions_per_packet } else { default_merged_dimension(&b, bm, cfg.tolerance)? };
            let op = MergeOperator::new(&b, bm, dim)?;
            let merged = PeriodicSynthesis::new(|u| op.merged_functions(&b, u), &s, &b, bm)?;
            cases.push(StreamCase { method, merge: bm, basis: b.clone(), recursion: Arc::clone(&recursion), phi: phi.clone(), op, single: single(&b)?, merged });
        }
    }
    let (batch_basis, batch_model) = scenario_model(&s, cfg.tolerance, cfg.grid_density, None)?;
    let batch_psi = build_synthesis(&batch_basis, batch_model.output_offsets.as_slice(), batch_model.dimension())?;
    let batch_w = LeastSquares::new(&batch_model, cfg.delta, "")?.composite_weights(&batch_psi);
    let long = s.with_n_snapshots(k_total * n)?;
    let (lo, hi) = if k_total > 2 * EDGE_PACKETS { (EDGE_PACKETS * n, (k_total - EDGE_PACKETS) * n) } else { (0, k_total * n) };
    let rows = par_trials(cfg.trials, |t| {
        let seeds = signal_seeds(cfg.seed, t, 1);
        let sig = TestSignal::for_scenario(cfg.signal, &long, seeds[0])?;
        let clean = source_samples(&sig, &long, &long.angle)?;
        let truth = DVector::from_vec(sig.evaluate(&long.plan.snapshot_times.as_slice()[lo..hi])?);
        let mut out = Vec::new();
        for (i, &snr) in cfg.snr_db.iter().enumerate() {
            let y = &clean + noise_batch(&mut noise_rng(cfg.seed, t, i), m, k_total * n, db_to_power(-snr));
            let batches: Vec<DVector<Cx>> = (0..k_total).map(|k| stacked(&y.columns(k * n, n).into_owned())).collect();
            let mut est = DVector::zeros(hi - lo);
            for (k, yk) in batches.iter().enumerate() {
                let e = &batch_w * yk;
                for j in 0..n {
                    let idx = k * n + j;
                    if idx >= lo && idx < hi {
                        est[idx - lo] = e[j];
                    }
                }
            }
            out.push(row("batch", &format!("D={}", batch_model.dimension()), t, snr, None, &est, &truth)?);
            let mut done: Vec<(&'static str, Vec<DVector<Cx>>)> = Vec::new();
            for case in &cases {
                if !done.iter().any(|(m, _)| *m == case.method) {
                    let input: Vec<DVector<Cx>> = match &case.phi {
                        Some(phi) => batches.iter().map(|b| phi * b).collect(),
                        None => batches.clone(),
                    };
                    let mut st = PacketStream::start(Arc::clone(&case.recursion), &input[0], &input[1], Some(cfg.buffer))?;
                    for yk in &input[2..] {
                        st.step(yk)?;
                    }
                    done.push((case.method, st.finish().into_iter().map(|(_, a)| a).collect()));
                }
                let packets = &done.iter().find(|(m, _)| *m == case.method).expect("just streamed").1;
                let mut est = DVector::zeros(hi - lo);
                let groups = packets.len() / case.merge;
                for g in 0..groups {
                    let first = g * case.merge;
                    if case.merge == 1 {
                        case.single.add(&mut est, lo, first, n, &packets[first]);
                    } else {
                        let merged = merge_packets(&case.op, &packets[first..first + case.merge])?;
                        case.merged.add(&mut est, lo, first, n, &merged);
                    }
                }
                for k in groups * case.merge..packets.len() {
                    case.single.add(&mut est, lo, k, n, &packets[k]);
                }
                let setting = format!("B'={},D={}", case.merge, case.op.merged_dim);
                out.push(row(case.method, &setting, t, snr, None, &est, &truth)?);
            }
        }
        Ok(out)
    })?;
    let mut res = ExperimentResult::with_trials(Verb::Streaming, rows, m);
    let mut geo = Table::new("packets", &["method", "merge", "functions_per_packet", "merged_dimension", "core_s", "overlap_s", "converged_at"]);
    for c in &cases {
        geo.push(vec![
            c.method.into(),
            c.merge.into(),
            c.basis.functions_per_packet.into(),
            c.op.merged_dim.into(),
            c.basis.core_length().into(),
            c.basis.overlap_length.into(),
            c.recursion.converged_at.map_or(-1, |v| v as i64).into(),
        ]);
    }
    res.tables.push(geo);
    res.tables.push(model_table(&s, batch_model.dimension()));
    Ok(res)
}

// ---------------------------------------------------------------------------
// encode

/// Encoded least squares against the full solve, plus variance multipliers of
/// each encoder and of a random encoder with the same number of measurements.
pub fn encode(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    let s = cfg.scenario()?;
    let (m, n) = (s.element_count(), s.snapshot_count());
    let (basis, model) = scenario_model(&s, cfg.tolerance, cfg.grid_density, None)?;
    let d = model.dimension();
    let psi = build_synthesis(&basis, model.output_offsets.as_slice(), d)?;
    let ls = LeastSquares::new(&model, cfg.delta, "")?.composite_weights(&psi);
    let cases = encoder_cases(cfg, &s, &model)?;
    let ws: Vec<DMatrix<Cx>> = cases.iter().map(|c| encoded_weights(&c.matrix, &model, &psi, cfg.delta)).collect::<Result<_>>()?;
    let per: Vec<(Vec<TrialRow>, Vec<f64>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<_> {
            let seeds = signal_seeds(cfg.seed, t, 1);
            let sig = TestSignal::for_scenario(cfg.signal, &s, seeds[0])?;
            let clean = source_samples(&sig, &s, &s.angle)?;
            let truth = DVector::from_vec(sig.evaluate(s.plan.snapshot_times.as_slice())?);
            let mut out = Vec::new();
            let mut diffs = vec![0.0; cases.len()];
            for (i, &snr) in cfg.snr_db.iter().enumerate() {
                let y = stacked(&(&clean + noise_batch(&mut noise_rng(cfg.seed, t, i), m, n, db_to_power(-snr))));
                let full = &ls * &y;
                out.push(row("ls", &format!("D={d}"), t, snr, None, &full, &truth)?);
                for (c, (case, w)) in cases.iter().zip(&ws).enumerate() {
                    let est = w * &y;
                    diffs[c] += (&est - &full).norm() / full.norm().max(f64::MIN_POSITIVE);
                    out.push(row("encoded", &case.label, t, snr, None, &est, &truth)?);
                }
            }
            Ok((out, diffs))
        })
        .collect::<Result<_>>()?;
    let points = (cfg.trials * cfg.snr_db.len()).max(1) as f64;
    let mut diff = vec![0.0; cases.len()];
    let mut rows = Vec::new();
    for (r, dv) in per {
        rows.extend(r);
        for (a, b) in diff.iter_mut().zip(dv) {
            *a += b / points;
        }
    }
    let mut res = ExperimentResult::with_trials(Verb::Encode, rows, m);
    let mut t = Table::new(
        "encoders",
        &["encoder", "parameter", "measurements", "variance_multiplier", "random_variance_multiplier", "mean_relative_difference"],
    );
    let a = &model.stacked_matrix;
    for (case, dv) in cases.iter().zip(diff) {
        let p = case.matrix.nrows();
        let vm = encodings::variance_multiplier(&case.matrix, a).map_or(f64::INFINITY, |v| v);
        let random = if p >= d && p <= a.nrows() {
            encodings::variance_multiplier(&make_random_encoder(p, a.nrows(), cfg.seed)?.matrix, a).map_or(f64::INFINITY, |v| v)
        } else {
            f64::INFINITY
        };
        t.push(vec![case.label.clone().into(), case.parameter.into(), p.into(), vm.into(), random.into(), dv.into()]);
    }
    res.tables.push(t);
    res.tables.push(model_table(&s, d));
    Ok(res)
}

// ---------------------------------------------------------------------------
// diag

fn base_dimension(s: &ArrayScenario<f64>) -> i64 {
    (2.0 * s.bandwidth * s.span()).ceil() as i64 + s.snapshot_count() as i64 - 1
}

/// Error budget across the margin sweep, random-versus-array sampling,
/// nulling bias per interferer and, when `merge` lists groups of more than
/// one packet, the merge-accuracy grid.
pub fn diag(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    let s = cfg.scenario()?;
    let exact = ExactModel::new(&s, cfg.grid_density)?;
    let base = base_dimension(&s);
    let dims: Vec<(i64, usize)> = cfg
        .margins
        .iter()
        .map(|&l| {
            let d = base + l;
            if d < 1 || d as usize > exact.kept() {
                Err(Error::Config(format!("margin {l} gives dimension {d}, outside 1..={}", exact.kept())))
            } else {
                Ok((l, d as usize))
            }
        })
        .collect::<Result<_>>()?;
    let mut res = ExperimentResult::new(Verb::Diag);

    let mut budget = Table::new(
        "budget",
        &[
            "margin",
            "dimension",
            "time_bandwidth",
            "truncation_bias",
            "normalized_truncation",
            "mismatch_bias",
            "normalized_mismatch",
            "variance_multiplier",
        ],
    );
    for &(l, d) in &dims {
        let b = exact.budget(s.bandwidth, d)?;
        budget.push(vec![
            l.into(),
            d.into(),
            b.time_bandwidth.into(),
            b.truncation_bias.into(),
            b.normalized_truncation().into(),
            b.mismatch_bias.into(),
            b.normalized_mismatch().into(),
            b.variance_multiplier.into(),
        ]);
    }
    res.tables.push(budget);

    let basis = scenario_basis(&s, crate::diagnostics::TAIL_TOLERANCE, cfg.grid_density)?;
    let len = basis.interval_length();
    let samples = s.element_count() * s.snapshot_count();
    let draws: Vec<Vec<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t as u64);
            let mut times: Vec<f64> = (0..samples).map(|_| rng.random::<f64>() * len).collect();
            times.sort_by(f64::total_cmp);
            dims.iter().map(|&(_, d)| variance_multiplier(&scaled_samples(&basis, &times, d)?)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut sampling = Table::new("sampling", &["margin", "dimension", "array_variance", "random_variance_mean", "random_variance_std"]);
    for (j, &(l, d)) in dims.iter().enumerate() {
        let vals: Vec<f64> = draws.iter().map(|v| v[j]).collect();
        let (mean, sd) = mean_std(&vals);
        sampling.push(vec![l.into(), d.into(), variance_multiplier(&exact.model_matrix(d))?.into(), mean.into(), sd.into()]);
    }
    res.tables.push(sampling);

    if !cfg.interferers.is_empty() {
        let mass = 2.0 * s.bandwidth * len;
        let a = exact.model_matrix(s.representation_dim(cfg.tolerance)?);
        let mut nulling = Table::new("nulling", &["azimuth_deg", "elevation_deg", "interferer_dimension", "nulling_bias"]);
        for i in &cfg.interferers {
            let si = s.with_angle(ArrivalAngle::from_degrees(i.azimuth_deg, i.elevation_deg));
            let (_, mi) = scenario_model(&si, cfg.tolerance, cfg.grid_density, None)?;
            let proj = null_projector(&mi.stacked_matrix)?.interferer_projection();
            let bias = nulling_bias(&a, &proj, &exact.eigenvalues)? / mass;
            nulling.push(vec![i.azimuth_deg.into(), i.elevation_deg.into(), mi.dimension().into(), bias.into()]);
        }
        res.tables.push(nulling);
    }

    let groups: Vec<usize> = cfg.merge.iter().copied().filter(|&b| b > 1).collect();
    if !groups.is_empty() {
        let ts = s.sample_interval();
        let mut cells = Vec::new();
        for &bm in &groups {
            let total = s.batch_span() + ((bm - 1) * s.snapshot_count()) as f64 * ts;
            let merged_base = (2.0 * s.bandwidth * total - 1e-9).ceil() as i64;
            for &lp in &cfg.margins {
                for &lm in &cfg.merge_margins {
                    cells.push((bm, lp, lm, base + lp, merged_base + lm));
                }
            }
        }
        let errors: Vec<f64> = cells
            .par_iter()
            .map(|&(bm, _, _, dp, dm)| {
                if dp < 1 || dm < 1 {
                    return Err(Error::Config(format!("merge grid dimensions {dp}, {dm} must be positive")));
                }
                overlapping_merge_error(&s, bm, dp as usize, dm as usize)
            })
            .collect::<Result<_>>()?;
        let mut merge = Table::new("merge", &["packets", "packet_margin", "merged_margin", "packet_dimension", "merged_dimension", "relative_error"]);
        for (&(bm, lp, lm, dp, dm), e) in cells.iter().zip(errors) {
            merge.push(vec![bm.into(), lp.into(), lm.into(), dp.into(), dm.into(), e.into()]);
        }
        res.tables.push(merge);
    }
    Ok(res)
}
