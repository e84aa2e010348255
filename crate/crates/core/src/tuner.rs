//! Scoring and ranking of training configurations by time, energy and EDP,
//! GPU memory feasibility, and batch-size recommendations.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::arch::{LayerKind, ShapedNetwork};
use crate::costmodel::{parameter_count, CostSummary, DEFAULT_ELEMENT_BYTES};
use crate::energymodel::{
    predict, CalibrationReport, DeviceProfile, MeasurementRecord, Quantity, ScopeKey, Step, TrainingPlan,
};
use crate::multigpu::{
    gradient_bytes, hetero_step_time, ring_allreduce_time, set_energy, split_batch, GpuSet, MultiGpuError,
    OverlapPolicy,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TunerError {
    #[error("no measurement or model covers {0}")]
    NoDataForConfig(String),
    #[error("no feasible configuration to rank")]
    NothingFeasible,
    #[error(transparent)]
    MultiGpu(#[from] MultiGpuError),
    #[error("accuracy line {line}: {msg}")]
    InvalidAccuracy { line: u64, msg: String },
}

/// Energy-delay product in J·s.
pub fn edp(total_seconds: f64, total_joules: f64) -> f64 {
    assert!(total_seconds >= 0.0 && total_joules >= 0.0);
    total_seconds * total_joules
}

/// Energy-delay product expressed in kiloseconds × megajoules.
pub fn edp_ks_mj(total_seconds: f64, total_joules: f64) -> f64 {
    edp(total_seconds, total_joules) / 1e9
}

// ---------------------------------------------------------------------------
// Memory

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryModel {
    pub element_bytes: u64,
    /// Fixed allowance for the framework context, workspaces and fragmentation.
    pub overhead_bytes: u64,
}

pub const DEFAULT_MEMORY_OVERHEAD: u64 = 1 << 30;

impl Default for MemoryModel {
    fn default() -> Self {
        MemoryModel { element_bytes: DEFAULT_ELEMENT_BYTES, overhead_bytes: DEFAULT_MEMORY_OVERHEAD }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub bytes: u64,
    pub capacity: u64,
    pub feasible: bool,
}

impl MemoryModel {
    /// `element_bytes × (activations × B × 2 + weights + gradients) + overhead`,
    /// where activations are the per-sample output elements of every layer
    /// that materializes a new tensor. ReLU and dropout run in place.
    pub fn estimate(&self, net: &ShapedNetwork, batch: u64, device: &DeviceProfile) -> MemoryEstimate {
        let activations: u64 = net
            .per_layer
            .iter()
            .filter(|l| !matches!(l.spec.kind, LayerKind::Relu | LayerKind::Dropout))
            .map(|l| l.output.elems())
            .sum();
        let params = parameter_count(net);
        let bytes = self.element_bytes * (activations * batch * 2 + 2 * params) + self.overhead_bytes;
        MemoryEstimate { bytes, capacity: device.dram_bytes, feasible: bytes <= device.dram_bytes }
    }
}

pub fn memory_feasible(net: &ShapedNetwork, batch: u64, device: &DeviceProfile) -> MemoryEstimate {
    MemoryModel::default().estimate(net, batch, device)
}

// ---------------------------------------------------------------------------
// Scoring

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub network: String,
    pub batch: u64,
    pub gpu_set: GpuSet,
    pub plan: TrainingPlan,
}

impl fmt::Display for TrainingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} B={} on {}", self.network, self.batch, self.gpu_set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// Every per-batch value came from a measurement record.
    Measured,
    /// At least one value came from a calibrated model at this GPU count.
    Predicted,
    /// Single-GPU predictions at the per-GPU sub-batch plus modeled ring
    /// all-reduce time.
    Composed,
}

impl DataSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataSource::Measured => "measured",
            DataSource::Predicted => "predicted",
            DataSource::Composed => "composed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Totals {
    pub seconds: f64,
    pub joules: f64,
    /// Always `seconds × joules`.
    pub edp: f64,
}

impl Totals {
    pub fn new(seconds: f64, joules: f64) -> Self {
        Totals { seconds, joules, edp: edp(seconds, joules) }
    }

    pub fn kiloseconds(&self) -> f64 {
        self.seconds / 1e3
    }

    pub fn megajoules(&self) -> f64 {
        self.joules / 1e6
    }

    pub fn edp_ks_mj(&self) -> f64 {
        self.kiloseconds() * self.megajoules()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ranks {
    pub time: Option<usize>,
    pub energy: Option<usize>,
    pub edp: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigReport {
    pub config: TrainingConfig,
    /// Absent for infeasible configurations without data.
    pub totals: Option<Totals>,
    pub feasible: bool,
    pub reason: String,
    pub memory_bytes: Option<u64>,
    pub source: Option<DataSource>,
    pub warnings: Vec<String>,
    pub ranks: Ranks,
}

/// Where per-batch values come from.
#[derive(Debug, Clone, Copy)]
pub struct ScoreInputs<'a> {
    pub records: &'a [MeasurementRecord],
    pub models: Option<&'a CalibrationReport>,
    /// Allow calibrated-model predictions when no record matches.
    pub allow_prediction: bool,
    pub devices: &'a [DeviceProfile],
    /// Shaped network for the memory check and gradient volume; skipped when absent.
    pub network: Option<&'a ShapedNetwork>,
    /// Per-sample costs; needed for the composed multi-GPU estimate.
    pub cost: Option<&'a CostSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub memory: MemoryModel,
    /// Fraction added to time and energy for the weight-update step (0 to exclude).
    pub update_adjustment: f64,
    pub overlap: OverlapPolicy,
}

/// Suggested allowance for the weight-update step.
pub const UPDATE_STEP_FRACTION: f64 = 0.05;

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions { memory: MemoryModel::default(), update_adjustment: 0.0, overlap: OverlapPolicy::default() }
    }
}

struct PerBatch {
    seconds: f64,
    joules: f64,
    source: DataSource,
}

fn lookup(
    inputs: &ScoreInputs,
    device: &str,
    network: &str,
    step: Step,
    gpus: u32,
    batch: u64,
    warnings: &mut Vec<String>,
) -> Option<PerBatch> {
    if let Some(r) = inputs.records.iter().find(|r| {
        r.device == device && r.network == network && r.step == step && r.gpus == gpus && r.batch == batch
    }) {
        return Some(PerBatch { seconds: r.seconds_per_batch, joules: r.joules_per_batch, source: DataSource::Measured });
    }
    if !inputs.allow_prediction {
        return None;
    }
    let report = inputs.models?;
    let key = ScopeKey { device: device.into(), network: network.into(), step, gpus };
    let ms = report.model(&key, Quantity::Seconds)?;
    let mj = report.model(&key, Quantity::Joules)?;
    let (ps, pj) = (predict(ms, batch), predict(mj, batch));
    if ps.extrapolated || pj.extrapolated {
        warnings.push(format!(
            "extrapolation: {key} at B={batch} is outside [{}, {}]",
            ms.batch_min / 2,
            ms.batch_max * 2
        ));
    }
    Some(PerBatch { seconds: ps.value, joules: pj.value, source: DataSource::Predicted })
}

pub fn score(config: &TrainingConfig, inputs: &ScoreInputs, opts: &ScoreOptions) -> Result<ConfigReport, TunerError> {
    let gpus = config.gpu_set.total();
    let sub_batch = split_batch(config.batch, gpus)?;
    let mut warnings = Vec::new();

    // memory, checked per device on the per-GPU sub-batch
    let mut feasible = true;
    let mut reason = String::from("not checked");
    let mut memory_bytes = None;
    if let Some(net) = inputs.network {
        reason = "fits".into();
        for (device, _) in config.gpu_set.active() {
            let Some(profile) = inputs.devices.iter().find(|d| d.name == device) else {
                warnings.push(format!("no profile for `{device}`; memory not checked"));
                continue;
            };
            let est = opts.memory.estimate(net, sub_batch, profile);
            memory_bytes = Some(memory_bytes.unwrap_or(0).max(est.bytes));
            if !est.feasible {
                feasible = false;
                reason = format!(
                    "needs {:.2} GiB per GPU on {device}, {:.2} GiB available",
                    est.bytes as f64 / (1u64 << 30) as f64,
                    est.capacity as f64 / (1u64 << 30) as f64
                );
            }
        }
    }

    let totals = match per_batch(config, inputs, opts, sub_batch, &mut warnings) {
        Ok((seconds, joules, source)) => {
            let k = config.plan.iterations as f64 * (1.0 + opts.update_adjustment);
            Some((Totals::new(seconds * k, joules * k), source))
        }
        Err(_) if !feasible => None,
        Err(e) => return Err(e),
    };
    Ok(ConfigReport {
        config: config.clone(),
        totals: totals.map(|t| t.0),
        feasible,
        reason,
        memory_bytes,
        source: totals.map(|t| t.1),
        warnings,
        ranks: Ranks::default(),
    })
}

fn per_batch(
    config: &TrainingConfig,
    inputs: &ScoreInputs,
    opts: &ScoreOptions,
    sub_batch: u64,
    warnings: &mut Vec<String>,
) -> Result<(f64, f64, DataSource), TunerError> {
    let gpus = config.gpu_set.total();
    let net = config.network.as_str();
    let mut compute = Vec::new();
    let mut joules = BTreeMap::new();
    let mut source = DataSource::Measured;
    let mut direct = true;
    for (device, _) in config.gpu_set.active() {
        let f = lookup(inputs, device, net, Step::Forward, gpus, config.batch, warnings);
        let b = lookup(inputs, device, net, Step::Backward, gpus, config.batch, warnings);
        match (f, b) {
            (Some(f), Some(b)) => {
                if f.source != DataSource::Measured || b.source != DataSource::Measured {
                    source = DataSource::Predicted;
                }
                compute.push((device.to_string(), f.seconds + b.seconds));
                joules.insert(device.to_string(), f.joules + b.joules);
            }
            _ => {
                direct = false;
                break;
            }
        }
    }
    if direct {
        // measured multi-GPU times already include communication
        let step = hetero_step_time(&compute, 0.0, 1.0);
        return Ok((step.step_time, set_energy(&joules, &config.gpu_set)?, source));
    }
    if gpus > 1 && inputs.allow_prediction {
        if let Some(r) = composed(config, inputs, opts, sub_batch, warnings) {
            return Ok(r);
        }
    }
    Err(TunerError::NoDataForConfig(config.to_string()))
}

fn composed(
    config: &TrainingConfig,
    inputs: &ScoreInputs,
    opts: &ScoreOptions,
    sub_batch: u64,
    warnings: &mut Vec<String>,
) -> Option<(f64, f64, DataSource)> {
    let cost = inputs.cost?;
    let net = inputs.network?;
    let mut compute = Vec::new();
    let mut joules = BTreeMap::new();
    for (device, _) in config.gpu_set.active() {
        let f = lookup(inputs, device, &config.network, Step::Forward, 1, sub_batch, warnings)?;
        let b = lookup(inputs, device, &config.network, Step::Backward, 1, sub_batch, warnings)?;
        compute.push((device.to_string(), f.seconds + b.seconds));
        joules.insert(device.to_string(), f.joules + b.joules);
    }
    let bytes = gradient_bytes(parameter_count(net), cost.element_bytes);
    let comm = ring_allreduce_time(bytes, config.gpu_set.total(), &config.gpu_set);
    let omega = opts.overlap.omega(cost.ctc().unwrap_or(0.0));
    let step = hetero_step_time(&compute, comm, omega);
    warnings.push(format!(
        "composed from single-GPU data at B={sub_batch} with modeled all-reduce (overlap {omega} is a heuristic)"
    ));
    Some((step.step_time, set_energy(&joules, &config.gpu_set).ok()?, DataSource::Composed))
}

// ---------------------------------------------------------------------------
// Ranking

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Time,
    Energy,
    Edp,
}

impl Metric {
    pub fn of(&self, t: &Totals) -> f64 {
        match self {
            Metric::Time => t.seconds,
            Metric::Energy => t.joules,
            Metric::Edp => t.edp,
        }
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "time" => Ok(Metric::Time),
            "energy" => Ok(Metric::Energy),
            "edp" => Ok(Metric::Edp),
            _ => Err(format!("unknown metric `{s}` (time, energy, edp)")),
        }
    }
}

fn order(metric: Metric, a: &ConfigReport, b: &ConfigReport) -> Ordering {
    let (ta, tb) = (a.totals.expect("ranked reports have totals"), b.totals.expect("ranked reports have totals"));
    metric
        .of(&ta)
        .total_cmp(&metric.of(&tb))
        .then(a.config.batch.cmp(&b.config.batch))
        .then(a.config.gpu_set.total().cmp(&b.config.gpu_set.total()))
        .then_with(|| a.config.network.cmp(&b.config.network))
        .then_with(|| a.config.gpu_set.to_string().cmp(&b.config.gpu_set.to_string()))
        .then(ta.seconds.total_cmp(&tb.seconds))
        .then(ta.joules.total_cmp(&tb.joules))
}

/// Feasible reports in ascending order of `metric`; ties go to the smaller
/// batch, then to fewer GPUs.
pub fn rank(reports: &[ConfigReport], metric: Metric) -> Result<Vec<ConfigReport>, TunerError> {
    let mut ok: Vec<ConfigReport> = reports.iter().filter(|r| r.feasible && r.totals.is_some()).cloned().collect();
    if ok.is_empty() {
        return Err(TunerError::NothingFeasible);
    }
    ok.sort_by(|a, b| order(metric, a, b));
    Ok(ok)
}

/// Fills in each feasible report's 1-based position under every metric.
pub fn assign_ranks(reports: &mut [ConfigReport]) {
    for metric in [Metric::Time, Metric::Energy, Metric::Edp] {
        let mut idx: Vec<usize> = (0..reports.len()).filter(|&i| reports[i].feasible && reports[i].totals.is_some()).collect();
        idx.sort_by(|&a, &b| order(metric, &reports[a], &reports[b]));
        for r in reports.iter_mut() {
            match metric {
                Metric::Time => r.ranks.time = None,
                Metric::Energy => r.ranks.energy = None,
                Metric::Edp => r.ranks.edp = None,
            }
        }
        for (pos, i) in idx.into_iter().enumerate() {
            let slot = match metric {
                Metric::Time => &mut reports[i].ranks.time,
                Metric::Energy => &mut reports[i].ranks.energy,
                Metric::Edp => &mut reports[i].ranks.edp,
            };
            *slot = Some(pos + 1);
        }
    }
}

// ---------------------------------------------------------------------------
// Accuracy data and recommendations

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct AccuracyRecord {
    pub network: String,
    pub batch: u64,
    pub metric: String,
    pub value: f64,
}

pub fn parse_accuracy<R: Read>(reader: R) -> Result<Vec<AccuracyRecord>, TunerError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<AccuracyRecord>() {
        let rec = rec.map_err(|e| TunerError::InvalidAccuracy {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        if !(0.0..=100.0).contains(&rec.value) {
            return Err(TunerError::InvalidAccuracy {
                line: out.len() as u64 + 2,
                msg: format!("accuracy {} outside [0, 100]", rec.value),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetClass {
    Small,
    Large,
}

impl FromStr for DatasetClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(DatasetClass::Small),
            "large" => Ok(DatasetClass::Large),
            _ => Err(format!("unknown dataset class `{s}` (small, large)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetFamily {
    PlainConv,
    Residual,
}

impl FromStr for NetFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain_conv" => Ok(NetFamily::PlainConv),
            "residual" => Ok(NetFamily::Residual),
            _ => Err(format!("unknown network family `{s}` (plain_conv, residual)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommendRequest<'a> {
    pub dataset: DatasetClass,
    pub family: NetFamily,
    /// Accuracy rows for the network under consideration.
    pub accuracy: Option<&'a [AccuracyRecord]>,
    /// Accuracy metric to compare; defaults to `weighted_average`, then
    /// `top1`, then the first metric present.
    pub accuracy_metric: Option<&'a str>,
    /// Batches whose accuracy is within this percentage of the best are kept.
    pub tolerance_pct: f64,
    /// Scored configurations of the network; may be empty.
    pub candidates: &'a [ConfigReport],
}

pub const DEFAULT_ACCURACY_TOLERANCE_PCT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub guideline: String,
    /// Batch sizes allowed by the rules and the accuracy filter.
    pub allowed_batches: Vec<u64>,
    pub batch: Option<u64>,
    /// Best-EDP candidate among the allowed batches.
    pub config: Option<ConfigReport>,
    pub advisory: Vec<String>,
}

pub const MULTI_GPU_ADVISORY: &str = "Using more than a pair of GPUs must be studied carefully: \
synchronization with slower devices and all-reduce traffic can erase the speedup.";

pub fn recommend(req: &RecommendRequest) -> Recommendation {
    let feasible: Vec<&ConfigReport> = req.candidates.iter().filter(|r| r.feasible && r.totals.is_some()).collect();
    let mut batches: BTreeSet<u64> = feasible.iter().map(|r| r.config.batch).collect();

    let guideline = match (req.dataset, req.family) {
        (DatasetClass::Large, _) => {
            "Large dataset: use the largest batch that fits; it is the best option for time, energy and accuracy."
        }
        (DatasetClass::Small, NetFamily::PlainConv) => {
            "Small dataset, plain convolutional network: large batches can be used to save time and energy."
        }
        (DatasetClass::Small, NetFamily::Residual) => {
            "Small dataset, residual network: rely on small batches for accuracy, at a cost in time and energy."
        }
    }
    .to_string();
    let mut advisory = Vec::new();

    let mut by_accuracy: Option<BTreeSet<u64>> = None;
    if let Some(acc) = req.accuracy {
        let metric = req
            .accuracy_metric
            .map(str::to_string)
            .or_else(|| ["weighted_average", "top1"].iter().find(|m| acc.iter().any(|a| a.metric == **m)).map(|m| m.to_string()))
            .or_else(|| acc.first().map(|a| a.metric.clone()));
        if let Some(metric) = metric {
            let rows: Vec<&AccuracyRecord> = acc.iter().filter(|a| a.metric == metric).collect();
            if let Some(best) = rows.iter().map(|a| a.value).max_by(f64::total_cmp) {
                let floor = best * (1.0 - req.tolerance_pct / 100.0);
                let keep: BTreeSet<u64> = rows.iter().filter(|a| a.value >= floor).map(|a| a.batch).collect();
                advisory.push(format!(
                    "accuracy filter on `{metric}`: best {best}, keeping batches within {}% ({:?})",
                    req.tolerance_pct, keep
                ));
                if batches.is_empty() {
                    batches = rows.iter().map(|a| a.batch).collect();
                }
                by_accuracy = Some(keep);
            }
        }
    }

    let allowed: Vec<u64> = match &by_accuracy {
        Some(keep) => batches.iter().copied().filter(|b| keep.contains(b)).collect(),
        None => match (req.dataset, req.family) {
            (DatasetClass::Large, _) => batches.iter().next_back().copied().into_iter().collect(),
            (DatasetClass::Small, NetFamily::Residual) => batches.iter().next().copied().into_iter().collect(),
            (DatasetClass::Small, NetFamily::PlainConv) => batches.iter().copied().collect(),
        },
    };

    let config = rank(
        &feasible.iter().filter(|r| allowed.contains(&r.config.batch)).map(|r| (*r).clone()).collect::<Vec<_>>(),
        Metric::Edp,
    )
    .ok()
    .and_then(|v| v.into_iter().next());

    let batch = match &config {
        Some(c) => Some(c.config.batch),
        None => match (req.dataset, req.family) {
            (DatasetClass::Small, NetFamily::Residual) => allowed.first().copied(),
            _ => allowed.last().copied(),
        },
    };
    if feasible.iter().any(|r| r.config.gpu_set.total() > 2) {
        advisory.push(MULTI_GPU_ADVISORY.to_string());
    }
    Recommendation { guideline, allowed_batches: allowed, batch, config, advisory }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build, infer_shapes, Builtin};
    use proptest::prelude::*;

    fn device(dram: u64) -> DeviceProfile {
        DeviceProfile {
            name: "d".into(),
            generation: "g".into(),
            cores: 1,
            core_freq_mhz: 1.0,
            peak_tflops: 1.0,
            dram_bytes: dram,
            bandwidth_bytes_per_s: 1.0,
            tdp_watts: 1.0,
        }
    }

    fn report(batch: u64, gpus: u32, s: f64, j: f64) -> ConfigReport {
        ConfigReport {
            config: TrainingConfig {
                network: "n".into(),
                batch,
                gpu_set: GpuSet::homogeneous("d", gpus),
                plan: TrainingPlan { network: "n".into(), batch, iterations: 1, epochs: 1 },
            },
            totals: Some(Totals::new(s, j)),
            feasible: true,
            reason: String::new(),
            memory_bytes: None,
            source: Some(DataSource::Measured),
            warnings: vec![],
            ranks: Ranks::default(),
        }
    }

    #[test]
    fn edp_examples() {
        assert!((edp_ks_mj(5.8e3, 0.77e6) - 4.466).abs() < 1e-9);
        assert_eq!(format!("{:.1}", edp_ks_mj(5.8e3, 0.77e6)), "4.5");
        assert_eq!(edp(0.0, 123.0), 0.0);
        assert!((edp_ks_mj(44.1e3, 19.40e6) - 855.54).abs() < 1e-9);
        assert!((edp_ks_mj(44.1e3, 19.40e6) - 855.3).abs() / 855.3 < 0.01);
    }

    #[test]
    fn tiny_network_fits() {
        let net = crate::arch::parse_network("input 2 2 1\nconv c filters=1 k=1").unwrap();
        let est = memory_feasible(&infer_shapes(&net).unwrap(), 1, &device(12 << 30));
        assert!(est.feasible);
        assert!(est.bytes < (12u64 << 30) / 10);
    }

    #[test]
    fn resnet_im_memory_boundary() {
        let net = infer_shapes(&build(Builtin::ResnetIm, None)).unwrap();
        let d = device(12 << 30);
        assert!(memory_feasible(&net, 128, &d).feasible);
        assert!(!memory_feasible(&net, 256, &d).feasible);
    }

    #[test]
    fn rank_ties_and_errors() {
        let rs = vec![report(256, 1, 1.0, 1.0), report(64, 2, 1.0, 1.0), report(64, 1, 1.0, 1.0)];
        let r = rank(&rs, Metric::Edp).unwrap();
        let order: Vec<_> = r.iter().map(|r| (r.config.batch, r.config.gpu_set.total())).collect();
        assert_eq!(order, [(64, 1), (64, 2), (256, 1)]);
        let mut bad = report(64, 1, 1.0, 1.0);
        bad.feasible = false;
        assert_eq!(rank(&[bad], Metric::Time), Err(TunerError::NothingFeasible));
    }

    #[test]
    fn ranks_assigned() {
        let mut rs = vec![report(64, 1, 3.0, 1.0), report(128, 1, 1.0, 2.0)];
        rs[1].feasible = false;
        assign_ranks(&mut rs);
        assert_eq!(rs[0].ranks, Ranks { time: Some(1), energy: Some(1), edp: Some(1) });
        assert_eq!(rs[1].ranks, Ranks::default());
    }

    fn acc(rows: &[(u64, f64)]) -> Vec<AccuracyRecord> {
        rows.iter()
            .map(|(b, v)| AccuracyRecord { network: "n".into(), batch: *b, metric: "weighted_average".into(), value: *v })
            .collect()
    }

    #[test]
    fn recommendation_examples() {
        let gait = acc(&[(64, 76.0), (128, 62.8), (256, 55.4)]);
        let r = recommend(&RecommendRequest {
            dataset: DatasetClass::Small,
            family: NetFamily::Residual,
            accuracy: Some(&gait),
            accuracy_metric: None,
            tolerance_pct: 5.0,
            candidates: &[],
        });
        assert_eq!(r.batch, Some(64));

        let im: Vec<_> = [(64, 61.6), (128, 65.6), (256, 75.3)]
            .iter()
            .map(|(b, v)| AccuracyRecord { network: "n".into(), batch: *b, metric: "top1".into(), value: *v })
            .collect();
        let r = recommend(&RecommendRequest {
            dataset: DatasetClass::Large,
            family: NetFamily::Residual,
            accuracy: Some(&im),
            accuracy_metric: None,
            tolerance_pct: 5.0,
            candidates: &[],
        });
        assert_eq!(r.batch, Some(256));

        let plain = acc(&[(64, 86.0), (128, 84.4), (256, 81.6)]);
        // EDP favours the largest batch here
        let candidates = vec![report(64, 1, 3.0, 3.0), report(128, 1, 2.0, 2.0), report(256, 1, 1.0, 1.0)];
        let req = |tol| RecommendRequest {
            dataset: DatasetClass::Small,
            family: NetFamily::PlainConv,
            accuracy: Some(&plain),
            accuracy_metric: None,
            tolerance_pct: tol,
            candidates: &candidates,
        };
        let five = recommend(&req(5.0));
        assert_eq!(five.allowed_batches, [64, 128]);
        assert_eq!(five.batch, Some(128));
        let six = recommend(&req(6.0));
        assert_eq!(six.allowed_batches, [64, 128, 256]);
        assert_eq!(six.batch, Some(256));
    }

    #[test]
    fn rules_without_accuracy() {
        let candidates = vec![report(64, 1, 3.0, 3.0), report(128, 1, 1.0, 1.0), report(256, 4, 2.0, 2.0)];
        let req = |dataset, family| RecommendRequest {
            dataset,
            family,
            accuracy: None,
            accuracy_metric: None,
            tolerance_pct: 5.0,
            candidates: &candidates,
        };
        assert_eq!(recommend(&req(DatasetClass::Large, NetFamily::Residual)).batch, Some(256));
        assert_eq!(recommend(&req(DatasetClass::Small, NetFamily::Residual)).batch, Some(64));
        let plain = recommend(&req(DatasetClass::Small, NetFamily::PlainConv));
        assert_eq!(plain.batch, Some(128));
        assert!(plain.advisory.iter().any(|a| a == MULTI_GPU_ADVISORY));
    }

    #[test]
    fn accuracy_csv() {
        let ok = "network,batch,metric,value\nn,64,top1,44.0\n";
        assert_eq!(parse_accuracy(ok.as_bytes()).unwrap().len(), 1);
        let bad = "network,batch,metric,value\nn,64,top1,144.0\n";
        assert!(matches!(parse_accuracy(bad.as_bytes()), Err(TunerError::InvalidAccuracy { .. })));
    }

    fn grid() -> impl Strategy<Value = Vec<ConfigReport>> {
        prop::collection::vec((0usize..3, 0usize..3, 0.1f64..100.0, 0.1f64..100.0), 1..12).prop_map(|rows| {
            rows.into_iter()
                .map(|(b, g, s, j)| report([64, 128, 256][b], [1, 2, 4][g], s, j))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn argmin_invariant_under_energy_scaling(rs in grid(), k in 0.01f64..100.0) {
            let scaled: Vec<_> = rs.iter().map(|r| {
                let t = r.totals.unwrap();
                let mut r = r.clone();
                r.totals = Some(Totals::new(t.seconds, t.joules * k));
                r
            }).collect();
            for m in [Metric::Energy, Metric::Edp] {
                let a = &rank(&rs, m).unwrap()[0];
                let b = &rank(&scaled, m).unwrap()[0];
                prop_assert_eq!((a.config.batch, a.config.gpu_set.total()), (b.config.batch, b.config.gpu_set.total()));
                prop_assert_eq!(a.totals.unwrap().seconds, b.totals.unwrap().seconds);
            }
        }

        #[test]
        fn rank_ignores_input_order((rs, shuffled) in grid().prop_flat_map(|rs| (Just(rs.clone()), Just(rs).prop_shuffle()))) {
            for m in [Metric::Time, Metric::Energy, Metric::Edp] {
                let a: Vec<_> = rank(&rs, m).unwrap().into_iter().map(|r| r.totals).collect();
                let b: Vec<_> = rank(&shuffled, m).unwrap().into_iter().map(|r| r.totals).collect();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn edp_is_product_of_totals(s in 0.0f64..1e7, j in 0.0f64..1e9) {
            let t = Totals::new(s, j);
            prop_assert_eq!(t.edp, s * j);
        }
    }
}
