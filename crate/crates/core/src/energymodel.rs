//! Device profiles, per-batch measurement records, throughput and
//! whole-training totals, affine calibration of time/energy against batch
//! size, and performance-per-watt.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::CostSummary;
use crate::fmt::sig6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("profile line {line}: {msg}")]
    Profile { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    InvalidRecord { line: u64, msg: String },
    #[error("group {0}: need at least two distinct batch sizes")]
    InsufficientData(String),
    #[error("records do not describe the same configuration: {0}")]
    MismatchedRecords(String),
    #[error("record sets do not share the same keys: {0}")]
    KeyMismatch(String),
}

// ---------------------------------------------------------------------------
// Device profiles

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    pub generation: String,
    pub cores: u64,
    pub core_freq_mhz: f64,
    pub peak_tflops: f64,
    pub dram_bytes: u64,
    pub bandwidth_bytes_per_s: f64,
    pub tdp_watts: f64,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_profile(text: &str) -> Result<DeviceProfile, EnergyError> {
    let mut map: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| EnergyError::Profile {
            line: i + 1,
            msg: format!("expected key = value, got `{line}`"),
        })?;
        if map.insert(k.trim(), (i + 1, v.trim())).is_some() {
            return Err(EnergyError::Profile { line: i + 1, msg: format!("duplicate key `{}`", k.trim()) });
        }
    }
    let last = text.lines().count().max(1);
    let mut take = |key: &str| {
        map.remove(key)
            .ok_or_else(|| EnergyError::Profile { line: last, msg: format!("missing key `{key}`") })
    };
    fn num(key: &str, (line, v): (usize, &str)) -> Result<f64, EnergyError> {
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() && x > 0.0 => Ok(x),
            _ => Err(EnergyError::Profile { line, msg: format!("`{key}` must be a positive number, got `{v}`") }),
        }
    }
    fn int(key: &str, (line, v): (usize, &str)) -> Result<u64, EnergyError> {
        match v.parse::<u64>() {
            Ok(x) if x > 0 => Ok(x),
            _ => Err(EnergyError::Profile { line, msg: format!("`{key}` must be a positive integer, got `{v}`") }),
        }
    }
    let profile = DeviceProfile {
        name: take("name")?.1.to_string(),
        generation: take("generation")?.1.to_string(),
        cores: int("cores", take("cores")?)?,
        core_freq_mhz: num("core_freq_mhz", take("core_freq_mhz")?)?,
        peak_tflops: num("peak_tflops", take("peak_tflops")?)?,
        dram_bytes: int("dram_bytes", take("dram_bytes")?)?,
        bandwidth_bytes_per_s: num("bandwidth_bytes_per_s", take("bandwidth_bytes_per_s")?)?,
        tdp_watts: num("tdp_watts", take("tdp_watts")?)?,
    };
    if let Some((k, (line, _))) = map.into_iter().next() {
        return Err(EnergyError::Profile { line, msg: format!("unknown key `{k}`") });
    }
    if profile.name.is_empty() {
        return Err(EnergyError::Profile { line: 1, msg: "empty name".into() });
    }
    Ok(profile)
}

// ---------------------------------------------------------------------------
// Measurement records

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Forward,
    Backward,
}

impl Step {
    pub fn as_str(&self) -> &'static str {
        match self {
            Step::Forward => "forward",
            Step::Backward => "backward",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Step {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(Step::Forward),
            "backward" => Ok(Step::Backward),
            _ => Err(format!("unknown step `{s}`")),
        }
    }
}

/// Per-batch time and energy of one measured GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub device: String,
    pub network: String,
    pub step: Step,
    pub gpus: u32,
    pub batch: u64,
    pub seconds_per_batch: f64,
    pub joules_per_batch: f64,
}

impl MeasurementRecord {
    pub fn scope(&self) -> ScopeKey {
        ScopeKey {
            device: self.device.clone(),
            network: self.network.clone(),
            step: self.step,
            gpus: self.gpus,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.device.is_empty() || self.network.is_empty() {
            return Err("device and network must be non-empty".into());
        }
        if self.gpus == 0 || self.batch == 0 {
            return Err("gpus and batch must be positive".into());
        }
        if !(self.seconds_per_batch > 0.0 && self.seconds_per_batch.is_finite()) {
            return Err(format!("seconds_per_batch must be positive, got {}", self.seconds_per_batch));
        }
        if !(self.joules_per_batch > 0.0 && self.joules_per_batch.is_finite()) {
            return Err(format!("joules_per_batch must be positive, got {}", self.joules_per_batch));
        }
        Ok(())
    }
}

pub const MEASUREMENT_HEADER: &str = "device,network,step,gpus,batch,seconds_per_batch,joules_per_batch";

pub fn parse_measurements<R: Read>(reader: R) -> Result<Vec<MeasurementRecord>, EnergyError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| EnergyError::InvalidRecord { line: 1, msg: e.to_string() })?;
    if header.iter().collect::<Vec<_>>().join(",") != MEASUREMENT_HEADER {
        return Err(EnergyError::InvalidRecord { line: 1, msg: format!("header must be `{MEASUREMENT_HEADER}`") });
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<MeasurementRecord>() {
        let rec = rec.map_err(|e| EnergyError::InvalidRecord {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        rec.validate()
            .map_err(|msg| EnergyError::InvalidRecord { line: out.len() as u64 + 2, msg })?;
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Throughput and totals

pub fn samples_per_second(batch: u64, seconds_per_batch: f64) -> f64 {
    batch as f64 / seconds_per_batch
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub network: String,
    pub batch: u64,
    pub iterations: u64,
    pub epochs: u64,
}

impl TrainingPlan {
    /// Samples in one epoch implied by the plan.
    pub fn samples_per_epoch(&self) -> f64 {
        self.iterations as f64 * self.batch as f64 / self.epochs as f64
    }
}

pub fn parse_plans<R: Read>(reader: R) -> Result<Vec<TrainingPlan>, EnergyError> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| EnergyError::InvalidRecord {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Per-batch value times the number of iterations.
pub fn whole_training(per_batch_value: f64, plan: &TrainingPlan) -> f64 {
    assert!(plan.iterations >= 1, "a training plan needs at least one iteration");
    per_batch_value * plan.iterations as f64
}

/// `epochs × ceil(dataset_samples / batch)`.
pub fn iterations_for(dataset_samples: u64, batch: u64, epochs: u64) -> u64 {
    assert!(dataset_samples > 0 && batch > 0 && epochs > 0);
    epochs * dataset_samples.div_ceil(batch)
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScopeKey {
    pub device: String,
    pub network: String,
    pub step: Step,
    pub gpus: u32,
}

impl fmt::Display for ScopeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}gpu", self.device, self.network, self.step, self.gpus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quantity {
    Seconds,
    Joules,
}

impl Quantity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quantity::Seconds => "seconds",
            Quantity::Joules => "joules",
        }
    }

    pub fn of(&self, r: &MeasurementRecord) -> f64 {
        match self {
            Quantity::Seconds => r.seconds_per_batch,
            Quantity::Joules => r.joules_per_batch,
        }
    }
}

impl FromStr for Quantity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seconds" => Ok(Quantity::Seconds),
            "joules" => Ok(Quantity::Joules),
            _ => Err(format!("unknown quantity `{s}`")),
        }
    }
}

/// `value ≈ slope·batch + intercept` for one scope and quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedModel {
    pub key: ScopeKey,
    pub quantity: Quantity,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// (batch, measured − fitted)
    pub residuals: Vec<(u64, f64)>,
    pub batch_min: u64,
    pub batch_max: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares for `y = slope·x + intercept`. Needs two distinct x.
pub fn fit_line(points: &[(f64, f64)]) -> Option<LineFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - (slope * p.0 + intercept)).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let scale = points.iter().map(|p| p.1 * p.1).sum::<f64>().max(f64::MIN_POSITIVE);
    let r_squared = if ss_tot <= 1e-24 * scale {
        if ss_res <= 1e-24 * scale {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Some(LineFit { slope, intercept, r_squared })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    /// Groups with more GPUs than this are left out (mixed-device rows).
    pub max_gpus: u32,
    /// Fits below this R² are flagged.
    pub poor_fit_r2: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { max_gpus: 2, poor_fit_r2: 0.95 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationReport {
    pub models: Vec<CalibratedModel>,
    /// Groups that could not be fitted, with the reason.
    pub skipped: Vec<(ScopeKey, EnergyError)>,
    /// Groups excluded by the GPU-count filter.
    pub excluded: Vec<ScopeKey>,
    pub diagnostics: Vec<String>,
}

impl CalibrationReport {
    pub fn model(&self, key: &ScopeKey, q: Quantity) -> Option<&CalibratedModel> {
        self.models.iter().find(|m| &m.key == key && m.quantity == q)
    }
}

pub fn calibrate(records: &[MeasurementRecord], opts: &CalibrationOptions) -> CalibrationReport {
    let mut groups: BTreeMap<ScopeKey, Vec<&MeasurementRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.scope()).or_default().push(r);
    }
    let mut report = CalibrationReport { models: vec![], skipped: vec![], excluded: vec![], diagnostics: vec![] };
    for (key, mut rows) in groups {
        if key.gpus > opts.max_gpus {
            report.excluded.push(key);
            continue;
        }
        rows.sort_by_key(|r| r.batch);
        let distinct: BTreeSet<u64> = rows.iter().map(|r| r.batch).collect();
        if distinct.len() < 2 {
            report
                .diagnostics
                .push(format!("{key}: skipped, only {} distinct batch size(s)", distinct.len()));
            report.skipped.push((key.clone(), EnergyError::InsufficientData(key.to_string())));
            continue;
        }
        for q in [Quantity::Seconds, Quantity::Joules] {
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.batch as f64, q.of(r))).collect();
            let fit = fit_line(&pts).expect("two distinct batch sizes");
            let residuals = rows
                .iter()
                .map(|r| (r.batch, q.of(r) - (fit.slope * r.batch as f64 + fit.intercept)))
                .collect();
            if fit.r_squared < opts.poor_fit_r2 {
                report.diagnostics.push(format!(
                    "{key} {}: poor affine fit, R² = {}",
                    q.as_str(),
                    sig6(fit.r_squared)
                ));
            }
            if pts.windows(2).any(|w| w[1].1 < w[0].1) {
                report.diagnostics.push(format!(
                    "{key} {}: per-batch value decreases with batch size",
                    q.as_str()
                ));
            }
            report.models.push(CalibratedModel {
                key: key.clone(),
                quantity: q,
                slope: fit.slope,
                intercept: fit.intercept,
                r_squared: fit.r_squared,
                residuals,
                batch_min: *distinct.first().unwrap(),
                batch_max: *distinct.last().unwrap(),
            });
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    /// Batch outside `[batch_min/2, 2·batch_max]`.
    pub extrapolated: bool,
}

pub fn predict(model: &CalibratedModel, batch: u64) -> Prediction {
    assert!(batch > 0, "batch size must be positive");
    let b = batch as f64;
    let value = (model.slope * b + model.intercept).max(0.0);
    let extrapolated = b < model.batch_min as f64 / 2.0 || b > 2.0 * model.batch_max as f64;
    Prediction { value, extrapolated }
}

pub const MODEL_HEADER: &str =
    "device,network,step,gpus,quantity,slope,intercept,r_squared,batch_min,batch_max";

/// Model file: one CSV row per fitted model, full-precision coefficients.
pub fn models_to_csv(models: &[CalibratedModel]) -> String {
    let mut s = format!("{MODEL_HEADER}\n");
    for m in models {
        s.push_str(&format!(
            "{},{},{},{},{},{:e},{:e},{:e},{},{}\n",
            m.key.device,
            m.key.network,
            m.key.step,
            m.key.gpus,
            m.quantity.as_str(),
            m.slope,
            m.intercept,
            m.r_squared,
            m.batch_min,
            m.batch_max
        ));
    }
    s
}

#[derive(Deserialize)]
struct ModelRow {
    device: String,
    network: String,
    step: Step,
    gpus: u32,
    quantity: String,
    slope: f64,
    intercept: f64,
    r_squared: f64,
    batch_min: u64,
    batch_max: u64,
}

pub fn parse_models<R: Read>(reader: R) -> Result<Vec<CalibratedModel>, EnergyError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<ModelRow>() {
        let row = row.map_err(|e| EnergyError::InvalidRecord {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let quantity = row
            .quantity
            .parse()
            .map_err(|msg| EnergyError::InvalidRecord { line: out.len() as u64 + 2, msg })?;
        out.push(CalibratedModel {
            key: ScopeKey { device: row.device, network: row.network, step: row.step, gpus: row.gpus },
            quantity,
            slope: row.slope,
            intercept: row.intercept,
            r_squared: row.r_squared,
            residuals: vec![],
            batch_min: row.batch_min,
            batch_max: row.batch_max,
        });
    }
    Ok(out)
}

/// Cross-network fit `value = α·(ops·B) + β·(bytes·B)` over every record of
/// one (device, step, gpus) scope. Only the coefficients and residuals are
/// reported; it is not used for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossNetworkFit {
    pub alpha: f64,
    pub beta: f64,
    /// (network, batch, measured − fitted)
    pub residuals: Vec<(String, u64, f64)>,
}

pub fn fit_cross_network(
    records: &[&MeasurementRecord],
    per_sample: &BTreeMap<String, (f64, f64)>,
    quantity: Quantity,
) -> Option<CrossNetworkFit> {
    let rows: Vec<(&MeasurementRecord, f64, f64)> = records
        .iter()
        .filter_map(|r| {
            let (ops, bytes) = per_sample.get(&r.network)?;
            Some((*r, ops * r.batch as f64, bytes * r.batch as f64))
        })
        .collect();
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (r, x1, x2) in &rows {
        let y = quantity.of(r);
        s11 += x1 * x1;
        s12 += x1 * x2;
        s22 += x2 * x2;
        s1y += x1 * y;
        s2y += x2 * y;
    }
    let det = s11 * s22 - s12 * s12;
    if rows.len() < 2 || det.abs() <= 1e-12 * s11 * s22 {
        return None;
    }
    let alpha = (s1y * s22 - s2y * s12) / det;
    let beta = (s2y * s11 - s1y * s12) / det;
    let residuals = rows
        .iter()
        .map(|(r, x1, x2)| (r.network.clone(), r.batch, quantity.of(r) - alpha * x1 - beta * x2))
        .collect();
    Some(CrossNetworkFit { alpha, beta, residuals })
}

// ---------------------------------------------------------------------------
// Derived metrics

fn same_config(fwd: &MeasurementRecord, bwd: &MeasurementRecord) -> Result<(), EnergyError> {
    if fwd.device != bwd.device || fwd.network != bwd.network || fwd.gpus != bwd.gpus || fwd.batch != bwd.batch {
        return Err(EnergyError::MismatchedRecords(format!(
            "{}/{}/{}gpu/B={} vs {}/{}/{}gpu/B={}",
            fwd.device, fwd.network, fwd.gpus, fwd.batch, bwd.device, bwd.network, bwd.gpus, bwd.batch
        )));
    }
    if fwd.step != Step::Forward || bwd.step != Step::Backward {
        return Err(EnergyError::MismatchedRecords("expected one forward and one backward record".into()));
    }
    Ok(())
}

/// GFLOPS per watt of one training iteration, with the backward pass taken to
/// cost as many operations as the forward pass. Records hold the joules of one
/// measured GPU; a run on `gpus` devices is charged `gpus` times that.
pub fn gflops_per_watt_ops(ops_per_sample: f64, fwd: &MeasurementRecord, bwd: &MeasurementRecord) -> Result<f64, EnergyError> {
    same_config(fwd, bwd)?;
    let ops = 2.0 * ops_per_sample * fwd.batch as f64;
    let joules = fwd.gpus as f64 * (fwd.joules_per_batch + bwd.joules_per_batch);
    Ok(ops / joules / 1e9)
}

pub fn gflops_per_watt(summary: &CostSummary, fwd: &MeasurementRecord, bwd: &MeasurementRecord) -> Result<f64, EnergyError> {
    gflops_per_watt_ops(summary.total_ops as f64, fwd, bwd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub network: String,
    pub step: Step,
    pub gpus: u32,
    pub batch: u64,
    /// `(older − newer) / older × 100` for seconds per batch.
    pub time_pct: f64,
    /// Same for joules per batch.
    pub energy_pct: f64,
}

type GapKey = (String, Step, u32, u64);

fn gap_key(r: &MeasurementRecord) -> GapKey {
    (r.network.clone(), r.step, r.gpus, r.batch)
}

/// Relative improvement of `newer` over `older` per matching
/// (network, step, gpus, batch) key.
pub fn generation_gap(newer: &[MeasurementRecord], older: &[MeasurementRecord]) -> Result<Vec<GapRow>, EnergyError> {
    let index = |rs: &[MeasurementRecord]| -> Result<BTreeMap<GapKey, MeasurementRecord>, EnergyError> {
        let mut m = BTreeMap::new();
        for r in rs {
            if m.insert(gap_key(r), r.clone()).is_some() {
                return Err(EnergyError::KeyMismatch(format!("duplicate key {:?}", gap_key(r))));
            }
        }
        Ok(m)
    };
    let (a, b) = (index(newer)?, index(older)?);
    if a.keys().ne(b.keys()) {
        let missing: Vec<_> = a.keys().filter(|k| !b.contains_key(*k)).chain(b.keys().filter(|k| !a.contains_key(*k))).collect();
        return Err(EnergyError::KeyMismatch(format!("{:?}", missing.first())));
    }
    Ok(a
        .iter()
        .map(|(k, n)| {
            let o = &b[k];
            GapRow {
                network: k.0.clone(),
                step: k.1,
                gpus: k.2,
                batch: k.3,
                time_pct: (o.seconds_per_batch - n.seconds_per_batch) / o.seconds_per_batch * 100.0,
                energy_pct: (o.joules_per_batch - n.joules_per_batch) / o.joules_per_batch * 100.0,
            }
        })
        .collect())
}
