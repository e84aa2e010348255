use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::fs::File;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use edptune::arch::{build, infer_shapes, parse_network, Builtin, ShapedNetwork};
use edptune::bundled;
use edptune::costmodel::{network_cost, network_cost_with, CostSummary, WeightMode, DEFAULT_ELEMENT_BYTES, REPORT_HEADER};
use edptune::energymodel::{
    calibrate as fit_models, iterations_for, models_to_csv, parse_measurements, parse_models, parse_plans, parse_profile,
    predict as evaluate, CalibrationOptions, CalibrationReport, DeviceProfile, MeasurementRecord, Quantity, ScopeKey,
    Step, TrainingPlan,
};
use edptune::fmt::sig6;
use edptune::multigpu::{parse_gpu_set, GpuSet};
use edptune::powertrace::{
    energy_header, energy_row, generate_synthetic_trace, integrate as integrate_region, parse_regions, parse_trace, Noise,
    Segment, TraceProfile,
};
use edptune::tuner::{
    assign_ranks, parse_accuracy, rank as rank_reports, recommend as pick, score, AccuracyRecord, ConfigReport,
    DatasetClass, NetFamily, RecommendRequest, ScoreInputs, ScoreOptions, TrainingConfig, TunerError,
};

use crate::output::Report;
use crate::{AnalyzeArgs, CalibrateArgs, DataArgs, GenTraceArgs, GridArgs, IntegrateArgs, PredictArgs, RankArgs, RecommendArgs};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

// ---------------------------------------------------------------------------
// analyze

pub fn analyze(a: &AnalyzeArgs) -> Result<Report> {
    let spec = match (&a.builtin, &a.arch) {
        (Some(name), _) => build(name.parse::<Builtin>()?, a.classes),
        (None, Some(path)) => parse_network(&read(path)?).with_context(|| path.display().to_string())?,
        (None, None) => bail!("give an architecture file or --builtin"),
    };
    if a.batch == 0 {
        bail!("batch must be at least 1");
    }
    if a.element_bytes == 0 {
        bail!("element size must be at least 1 byte");
    }
    let shaped = infer_shapes(&spec)?;
    let mode = if a.literal_weights { WeightMode::Literal } else { WeightMode::Physical };
    let summary = network_cost_with(&shaped, a.element_bytes, mode)?;

    let mut header: Vec<String> = REPORT_HEADER.split(',').map(String::from).collect();
    header.insert(8, "total_ops".into());
    let mut report = Report::with_header(header);
    let b = a.batch;
    for l in &summary.per_layer {
        let o = l.ops.scaled(b);
        report.row(vec![
            l.name.clone(),
            l.kind.to_string(),
            o.macc.to_string(),
            o.max_ops.to_string(),
            o.add_div.to_string(),
            o.exp_add_div.to_string(),
            o.mul01.to_string(),
            o.bias_add.to_string(),
            o.total().to_string(),
            (l.data.read_bytes() * b).to_string(),
            (l.data.written_bytes() * b).to_string(),
        ]);
    }
    let o = summary.ops.scaled(b);
    report.row(vec![
        "total".into(),
        String::new(),
        o.macc.to_string(),
        o.max_ops.to_string(),
        o.add_div.to_string(),
        o.exp_add_div.to_string(),
        o.mul01.to_string(),
        o.bias_add.to_string(),
        o.total().to_string(),
        (summary.total_read_bytes() * b).to_string(),
        (summary.total_written_bytes() * b).to_string(),
    ]);
    report.note(format!(
        "network={} batch={b} ops_millions={} read_mb={} written_mb={} ctc={}",
        summary.network,
        sig6(summary.total_ops as f64 * b as f64 / 1e6),
        sig6(summary.read_mb() * b as f64),
        sig6(summary.written_mb() * b as f64),
        summary.ctc().map(sig6).unwrap_or_else(|| "undefined".into())
    ));
    Ok(report)
}

// ---------------------------------------------------------------------------
// integrate

pub fn integrate(a: &IntegrateArgs) -> Result<Report> {
    let trace = parse_trace(open(&a.trace)?).with_context(|| a.trace.display().to_string())?;
    let regions = parse_regions(open(&a.regions)?).with_context(|| a.regions.display().to_string())?;
    let mut report = Report::with_header(energy_header(&trace.channel_labels).split(',').map(String::from).collect());
    report.header.push("error".into());
    let width = report.header.len();
    for r in &regions {
        match integrate_region(&trace, r) {
            Ok(e) => {
                let mut cells: Vec<String> = energy_row(r, &e).split(',').map(String::from).collect();
                cells.push(String::new());
                report.row(cells);
            }
            Err(err) => {
                let mut cells = vec![r.id.clone(), r.label.to_string(), sig6(r.t_end - r.t_start)];
                cells.resize(width - 1, "NA".into());
                cells.push(err.to_string());
                report.row(cells);
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// calibrate / predict

fn load_records(d: &DataArgs) -> Result<Vec<MeasurementRecord>> {
    match &d.measurements {
        Some(p) => parse_measurements(open(p)?).with_context(|| p.display().to_string()),
        None => Ok(bundled::measurements()),
    }
}

pub fn calibrate(a: &CalibrateArgs) -> Result<Report> {
    let records = load_records(&a.data)?;
    if records.is_empty() {
        bail!("no measurements");
    }
    let opts = CalibrationOptions { max_gpus: a.max_gpus, poor_fit_r2: a.min_r2 };
    let cal = fit_models(&records, &opts);
    if let Some(path) = &a.models_out {
        fs::write(path, models_to_csv(&cal.models)).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let mut report = Report::new(&[
        "device", "network", "step", "gpus", "quantity", "slope", "intercept", "r_squared", "points", "batch_min",
        "batch_max",
    ]);
    for m in &cal.models {
        report.row(vec![
            m.key.device.clone(),
            m.key.network.clone(),
            m.key.step.to_string(),
            m.key.gpus.to_string(),
            m.quantity.as_str().into(),
            sig6(m.slope),
            sig6(m.intercept),
            sig6(m.r_squared),
            m.residuals.len().to_string(),
            m.batch_min.to_string(),
            m.batch_max.to_string(),
        ]);
    }
    report.note(format!(
        "fitted={} skipped={} excluded={}",
        cal.models.len(),
        cal.skipped.len(),
        cal.excluded.len()
    ));
    for (key, err) in &cal.skipped {
        report.note(format!("skipped {key}: {err}"));
    }
    for d in &cal.diagnostics {
        report.note(d.clone());
    }
    Ok(report)
}

pub fn predict(a: &PredictArgs) -> Result<Report> {
    let models = parse_models(open(&a.models)?).with_context(|| a.models.display().to_string())?;
    let steps = match &a.step {
        Some(s) => vec![s.parse::<Step>().map_err(|e| anyhow!(e))?],
        None => vec![Step::Forward, Step::Backward],
    };
    let mut report = Report::new(&[
        "device", "network", "step", "gpus", "batch", "seconds_per_batch", "joules_per_batch", "extrapolated",
    ]);
    for step in steps {
        let key = ScopeKey { device: a.device.clone(), network: a.network.clone(), step, gpus: a.gpus };
        let find = |q: Quantity| {
            models
                .iter()
                .find(|m| m.key == key && m.quantity == q)
                .ok_or_else(|| anyhow!("no {} model for {key}", q.as_str()))
        };
        let (ms, mj) = (find(Quantity::Seconds)?, find(Quantity::Joules)?);
        for &b in &a.batch {
            let (s, j) = (evaluate(ms, b), evaluate(mj, b));
            report.row(vec![
                key.device.clone(),
                key.network.clone(),
                step.to_string(),
                key.gpus.to_string(),
                b.to_string(),
                sig6(s.value),
                sig6(j.value),
                (s.extrapolated || j.extrapolated).to_string(),
            ]);
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// rank / recommend

struct Network {
    shaped: ShapedNetwork,
    cost: CostSummary,
}

struct Grid {
    records: Vec<MeasurementRecord>,
    devices: Vec<DeviceProfile>,
    models: Option<CalibrationReport>,
    plans: Vec<TrainingPlan>,
    networks: BTreeMap<String, Network>,
    selected: Vec<String>,
    sets: Vec<GpuSet>,
    opts: ScoreOptions,
}

/// The bundled four-GPU measurements were taken on a mixed machine with two
/// GPUs of each generation.
fn bundled_testbed() -> GpuSet {
    GpuSet::new(vec![(bundled::PASCAL.into(), 2), (bundled::MAXWELL.into(), 2)], 12e9, 10e-6)
        .expect("testbed set is valid")
}

fn parse_set_spec(spec: &str, resolve: &dyn Fn(&str) -> String) -> Result<GpuSet> {
    let mut members = Vec::new();
    for part in spec.split('+') {
        let (name, count) = part.split_once(':').unwrap_or((part, "1"));
        let count: u32 = count.trim().parse().with_context(|| format!("bad GPU count in `{spec}`"))?;
        if name.trim().is_empty() {
            bail!("empty device name in `{spec}`");
        }
        members.push((resolve(name.trim()), count));
    }
    Ok(GpuSet::new(members, edptune::multigpu::DEFAULT_LINK_BANDWIDTH, edptune::multigpu::DEFAULT_LINK_LATENCY)?)
}

impl Grid {
    fn load(g: &GridArgs) -> Result<Grid> {
        let records = load_records(&g.data)?;
        let mut devices = bundled::device_profiles();
        for p in &g.profile {
            let d = parse_profile(&read(p)?).with_context(|| p.display().to_string())?;
            devices.retain(|x| x.name != d.name);
            devices.push(d);
        }
        let resolve = |name: &str| -> String {
            devices
                .iter()
                .find(|d| d.name == name || d.generation == name)
                .map(|d| d.name.clone())
                .unwrap_or_else(|| name.to_string())
        };

        let measured: BTreeSet<&str> = records.iter().map(|r| r.device.as_str()).collect();
        let selected: Vec<String> = if g.device.is_empty() {
            measured.iter().map(|d| d.to_string()).collect()
        } else {
            g.device.iter().map(|d| resolve(d)).collect()
        };
        for d in &selected {
            if !measured.contains(d.as_str()) && !g.predict {
                bail!("no measurements for device `{d}`");
            }
        }

        let mut sets = Vec::new();
        for s in &g.set {
            sets.push(parse_set_spec(s, &resolve)?);
        }
        for p in &g.gpu_set {
            let mut set = parse_gpu_set(&read(p)?).with_context(|| p.display().to_string())?;
            for m in &mut set.members {
                m.0 = resolve(&m.0);
            }
            sets.push(set);
        }
        if sets.is_empty() {
            for d in &selected {
                sets.push(GpuSet::homogeneous(d, 1));
                sets.push(GpuSet::homogeneous(d, 2));
            }
            if g.data.bundled && selected.iter().any(|d| d == bundled::PASCAL || d == bundled::MAXWELL) {
                sets.push(bundled_testbed());
            }
        }

        let plans = match &g.plans {
            Some(p) => parse_plans(open(p)?).with_context(|| p.display().to_string())?,
            None => bundled::plans(),
        };

        let mut networks = BTreeMap::new();
        for b in Builtin::ALL {
            let shaped = infer_shapes(&build(b, None))?;
            let cost = network_cost(&shaped, DEFAULT_ELEMENT_BYTES)?;
            networks.insert(b.id().to_string(), Network { shaped, cost });
        }
        for p in &g.arch {
            let spec = parse_network(&read(p)?).with_context(|| p.display().to_string())?;
            let shaped = infer_shapes(&spec)?;
            let cost = network_cost(&shaped, DEFAULT_ELEMENT_BYTES)?;
            networks.insert(spec.name.clone(), Network { shaped, cost });
        }

        let models = match (&g.models, g.predict) {
            (Some(p), _) => Some(CalibrationReport {
                models: parse_models(open(p)?).with_context(|| p.display().to_string())?,
                ..Default::default()
            }),
            (None, true) => Some(fit_models(&records, &CalibrationOptions::default())),
            (None, false) => None,
        };
        if !(g.update_adjustment >= 0.0) {
            bail!("update adjustment must be nonnegative");
        }
        let opts = ScoreOptions { update_adjustment: g.update_adjustment, ..Default::default() };
        Ok(Grid { records, devices, models, plans, networks, selected, sets, opts })
    }

    fn networks(&self, g: &GridArgs) -> Vec<String> {
        let measured: BTreeSet<String> = self
            .records
            .iter()
            .filter(|r| self.selected.contains(&r.device))
            .map(|r| r.network.clone())
            .collect();
        if g.network.is_empty() {
            measured.into_iter().collect()
        } else {
            g.network.clone()
        }
    }

    fn plan(&self, g: &GridArgs, network: &str, batch: u64) -> Result<TrainingPlan> {
        if let Some(p) = self.plans.iter().find(|p| p.network == network && p.batch == batch) {
            return Ok(p.clone());
        }
        match (g.dataset_samples, g.epochs) {
            (Some(n), Some(e)) => Ok(TrainingPlan {
                network: network.into(),
                batch,
                iterations: iterations_for(n, batch, e),
                epochs: e,
            }),
            _ => Err(anyhow!("no training plan for {network} at batch {batch}; give --plans or --dataset-samples")),
        }
    }

    /// Every (set, batch) configuration of one network, scored. Configurations
    /// that cannot be scored are kept as infeasible rows with the reason.
    fn score_network(&self, g: &GridArgs, network: &str) -> Result<Vec<ConfigReport>> {
        let batches: BTreeSet<u64> = if g.batch.is_empty() {
            self.records
                .iter()
                .filter(|r| r.network == network && self.selected.contains(&r.device))
                .map(|r| r.batch)
                .collect()
        } else {
            g.batch.iter().copied().collect()
        };
        let net = self.networks.get(network);
        let inputs = ScoreInputs {
            records: &self.records,
            models: self.models.as_ref(),
            allow_prediction: g.predict,
            devices: &self.devices,
            network: net.map(|n| &n.shaped),
            cost: net.map(|n| &n.cost),
        };
        let mut out = Vec::new();
        for set in &self.sets {
            for &batch in &batches {
                let config = TrainingConfig {
                    network: network.into(),
                    batch,
                    gpu_set: set.clone(),
                    plan: self.plan(g, network, batch)?,
                };
                match score(&config, &inputs, &self.opts) {
                    Ok(r) => out.push(r),
                    Err(e @ (TunerError::NoDataForConfig(_) | TunerError::MultiGpu(_))) => out.push(ConfigReport {
                        config,
                        totals: None,
                        feasible: false,
                        reason: e.to_string(),
                        memory_bytes: None,
                        source: None,
                        warnings: vec![],
                        ranks: Default::default(),
                    }),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        assign_ranks(&mut out);
        Ok(out)
    }
}

const RANK_HEADER: &[&str] = &[
    "network",
    "rank",
    "gpu_set",
    "gpus",
    "batch",
    "kiloseconds",
    "megajoules",
    "edp_ks_mj",
    "time_rank",
    "energy_rank",
    "edp_rank",
    "source",
    "memory_gib",
    "feasible",
    "note",
];

fn rank_row(rank: Option<usize>, r: &ConfigReport) -> Vec<String> {
    let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    let num = |x: Option<f64>| x.map(sig6).unwrap_or_else(|| "NA".into());
    let t = r.totals;
    let mut note = if r.feasible { String::new() } else { r.reason.clone() };
    for w in &r.warnings {
        if !note.is_empty() {
            note.push_str("; ");
        }
        note.push_str(w);
    }
    vec![
        r.config.network.clone(),
        opt(rank),
        r.config.gpu_set.to_string(),
        r.config.gpu_set.total().to_string(),
        r.config.batch.to_string(),
        num(t.map(|t| t.kiloseconds())),
        num(t.map(|t| t.megajoules())),
        num(t.map(|t| t.edp_ks_mj())),
        opt(r.ranks.time),
        opt(r.ranks.energy),
        opt(r.ranks.edp),
        r.source.map(|s| s.as_str().to_string()).unwrap_or_else(|| "-".into()),
        num(r.memory_bytes.map(|b| b as f64 / (1u64 << 30) as f64)),
        r.feasible.to_string(),
        note,
    ]
}

pub fn rank(a: &RankArgs) -> Result<Report> {
    let grid = Grid::load(&a.grid)?;
    let mut report = Report::new(RANK_HEADER);
    let mut any = false;
    for network in grid.networks(&a.grid) {
        let reports = grid.score_network(&a.grid, &network)?;
        match rank_reports(&reports, a.metric) {
            Ok(ranked) => {
                any = true;
                for (i, r) in ranked.iter().enumerate() {
                    report.row(rank_row(Some(i + 1), r));
                }
            }
            Err(TunerError::NothingFeasible) => report.note(format!("{network}: no feasible configuration")),
            Err(e) => return Err(e.into()),
        }
        for r in reports.iter().filter(|r| !(r.feasible && r.totals.is_some())) {
            report.row(rank_row(None, r));
        }
    }
    report.nothing_feasible = !any;
    Ok(report)
}

fn builtin_traits(network: &str) -> Option<(DatasetClass, NetFamily)> {
    let b: Builtin = network.parse().ok()?;
    let dataset = match b {
        Builtin::TwoDCnn | Builtin::ResnetGait => DatasetClass::Small,
        Builtin::CaffeNet | Builtin::ResnetIm => DatasetClass::Large,
    };
    let family = if b.is_residual() { NetFamily::Residual } else { NetFamily::PlainConv };
    Some((dataset, family))
}

pub fn recommend(a: &RecommendArgs) -> Result<Report> {
    let grid = Grid::load(&a.grid)?;
    let accuracy: Vec<AccuracyRecord> = match &a.accuracy {
        Some(p) => parse_accuracy(open(p)?).with_context(|| p.display().to_string())?,
        None if a.grid.data.bundled => bundled::accuracy_tum_gaid().into_iter().chain(bundled::accuracy_imagenet()).collect(),
        None => vec![],
    };
    let mut report = Report::new(&[
        "network", "dataset", "family", "allowed_batches", "batch", "gpu_set", "kiloseconds", "megajoules", "edp_ks_mj",
        "guideline",
    ]);
    let mut any = false;
    for network in grid.networks(&a.grid) {
        let traits = builtin_traits(&network);
        let dataset = match (&a.dataset, traits) {
            (Some(s), _) => s.parse().map_err(|e: String| anyhow!(e))?,
            (None, Some((d, _))) => d,
            (None, None) => bail!("give --dataset for `{network}`"),
        };
        let family = match (&a.family, traits) {
            (Some(s), _) => s.parse().map_err(|e: String| anyhow!(e))?,
            (None, Some((_, f))) => f,
            (None, None) => bail!("give --family for `{network}`"),
        };
        let candidates = grid.score_network(&a.grid, &network)?;
        let acc: Vec<AccuracyRecord> = accuracy.iter().filter(|r| r.network == network).cloned().collect();
        let rec = pick(&RecommendRequest {
            dataset,
            family,
            accuracy: (!acc.is_empty()).then_some(acc.as_slice()),
            accuracy_metric: a.accuracy_metric.as_deref(),
            tolerance_pct: a.tolerance_pct,
            candidates: &candidates,
        });
        any |= rec.config.is_some();
        let t = rec.config.as_ref().and_then(|c| c.totals);
        let num = |x: Option<f64>| x.map(sig6).unwrap_or_else(|| "NA".into());
        report.row(vec![
            network.clone(),
            format!("{dataset:?}").to_lowercase(),
            match family {
                NetFamily::PlainConv => "plain_conv".into(),
                NetFamily::Residual => "residual".into(),
            },
            rec.allowed_batches.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            rec.batch.map(|b| b.to_string()).unwrap_or_else(|| "-".into()),
            rec.config.as_ref().map(|c| c.config.gpu_set.to_string()).unwrap_or_else(|| "-".into()),
            num(t.map(|t| t.kiloseconds())),
            num(t.map(|t| t.megajoules())),
            num(t.map(|t| t.edp_ks_mj())),
            rec.guideline.clone(),
        ]);
        for adv in &rec.advisory {
            report.note(format!("{network}: {adv}"));
        }
    }
    report.nothing_feasible = !any;
    Ok(report)
}

// ---------------------------------------------------------------------------
// gen-trace

fn parse_segment(s: &str) -> Result<Segment> {
    let v: Vec<f64> = s
        .split(':')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad segment `{s}`"))?;
    match v[..] {
        [t0, t1, w] => Ok(Segment::constant(t0, t1, w)),
        [t0, t1, w0, w1] => Ok(Segment { t_start: t0, t_end: t1, start_watts: w0, end_watts: w1 }),
        _ => bail!("segment `{s}` should be START:END:WATTS[:END_WATTS]"),
    }
}

pub fn gen_trace(a: &GenTraceArgs) -> Result<Report> {
    let segments = a.segment.iter().map(|s| parse_segment(s)).collect::<Result<Vec<_>>>()?;
    let mut profile = TraceProfile::single_channel(segments);
    if !a.channel.is_empty() {
        profile.channel_labels.clear();
        profile.channel_weights.clear();
        for c in &a.channel {
            let (label, w) = c.split_once(':').unwrap_or((c, "1"));
            profile.channel_labels.push(label.trim().to_string());
            profile.channel_weights.push(w.trim().parse().with_context(|| format!("bad channel weight in `{c}`"))?);
        }
    }
    let noise = a.noise.map(|sigma_watts| Noise { sigma_watts, seed: a.seed });
    let trace = generate_synthetic_trace(&profile, a.rate, noise)?;
    if let Some(path) = &a.regions_out {
        let mut s = String::from("id,label,t_start_s,t_end_s\n");
        for (i, seg) in profile.segments.iter().enumerate() {
            s.push_str(&format!("seg{},other,{},{}\n", i + 1, seg.t_start, seg.t_end));
        }
        fs::write(path, s).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let text = trace.to_csv();
    let mut lines = text.lines();
    let mut report = Report::with_header(lines.next().unwrap_or("t").split(',').map(String::from).collect());
    for l in lines {
        report.row(l.split(',').map(String::from).collect());
    }
    Ok(report)
}
