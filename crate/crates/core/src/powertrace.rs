//! Multi-channel power traces: CSV ingestion, labeled regions, trapezoidal
//! energy integration, multi-GPU energy scaling and a synthetic trace
//! generator used as a stand-in for a measurement rig.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::fmt::sig6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Format { line: u64, msg: String },
    #[error("line {line}: timestamp {t} is earlier than {previous}")]
    NonMonotoneTime { line: u64, t: f64, previous: f64 },
    #[error("line {line}: expected {expected} channels, found {found}")]
    ChannelCountMismatch { line: u64, expected: usize, found: usize },
    #[error("region `{0}` does not overlap the trace")]
    EmptyRegion(String),
    #[error("region `{0}` is not covered by samples on both sides")]
    InsufficientSamples(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSample {
    pub t: f64,
    pub channel_watts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    pub channel_labels: Vec<String>,
    pub samples: Vec<PowerSample>,
}

impl PowerTrace {
    pub fn channels(&self) -> usize {
        self.channel_labels.len()
    }

    /// Time span covered by the samples.
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.t, self.samples.last()?.t))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s");
        for l in &self.channel_labels {
            s.push_str(&format!(",{l}_w"));
        }
        s.push('\n');
        for sample in &self.samples {
            // full precision so that a written trace reparses to the same values
            s.push_str(&format!("{}", sample.t));
            for w in &sample.channel_watts {
                s.push_str(&format!(",{w}"));
            }
            s.push('\n');
        }
        s
    }
}

fn csv_line(pos: Option<&csv::Position>) -> u64 {
    pos.map(|p| p.line()).unwrap_or(0)
}

fn parse_f64(field: &str, line: u64, what: &str) -> Result<f64, TraceError> {
    let v: f64 = field.trim().parse().map_err(|_| TraceError::Format {
        line,
        msg: format!("{what}: `{field}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(TraceError::Format { line, msg: format!("{what}: `{field}` is not finite") });
    }
    Ok(v)
}

/// Reads a trace CSV with header `t_s,<label>_w,...`. Rows sharing a
/// timestamp are merged by averaging their readings.
pub fn parse_trace<R: Read>(reader: R) -> Result<PowerTrace, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| TraceError::Format { line: 1, msg: e.to_string() })?
        .clone();
    if header.get(0) != Some("t_s") || header.len() < 2 {
        return Err(TraceError::Format {
            line: 1,
            msg: "header must be `t_s,<label>_w,...` with at least one channel".into(),
        });
    }
    let labels: Vec<String> = header
        .iter()
        .skip(1)
        .map(|h| h.strip_suffix("_w").unwrap_or(h).to_string())
        .collect();
    let expected = labels.len();
    let mut samples: Vec<PowerSample> = Vec::new();
    let mut dup_count = 1usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TraceError::Format { line: csv_line(e.position()), msg: e.to_string() })?;
        let line = csv_line(rec.position());
        if rec.len() - 1 != expected {
            return Err(TraceError::ChannelCountMismatch { line, expected, found: rec.len().saturating_sub(1) });
        }
        let t = parse_f64(&rec[0], line, "t_s")?;
        let mut watts = Vec::with_capacity(expected);
        for (i, f) in rec.iter().skip(1).enumerate() {
            let w = parse_f64(f, line, &labels[i])?;
            if w < 0.0 {
                return Err(TraceError::Format { line, msg: format!("{}: negative power {w}", labels[i]) });
            }
            watts.push(w);
        }
        match samples.last_mut() {
            Some(prev) if t < prev.t => {
                return Err(TraceError::NonMonotoneTime { line, t, previous: prev.t });
            }
            Some(prev) if t == prev.t => {
                // running mean over the rows sharing this timestamp
                dup_count += 1;
                let n = dup_count as f64;
                for (p, w) in prev.channel_watts.iter_mut().zip(&watts) {
                    *p += (w - *p) / n;
                }
            }
            _ => {
                dup_count = 1;
                samples.push(PowerSample { t, channel_watts: watts });
            }
        }
    }
    Ok(PowerTrace { channel_labels: labels, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Forward,
    Backward,
    Update,
    Load,
    Other,
}

impl RegionLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionLabel::Forward => "forward",
            RegionLabel::Backward => "backward",
            RegionLabel::Update => "update",
            RegionLabel::Load => "load",
            RegionLabel::Other => "other",
        }
    }
}

impl FromStr for RegionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "forward" => RegionLabel::Forward,
            "backward" => RegionLabel::Backward,
            "update" => RegionLabel::Update,
            "load" => RegionLabel::Load,
            "other" => RegionLabel::Other,
            _ => return Err(format!("unknown region label `{s}`")),
        })
    }
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: String,
    pub label: RegionLabel,
    pub t_start: f64,
    pub t_end: f64,
}

impl Region {
    pub fn new(id: &str, label: RegionLabel, t_start: f64, t_end: f64) -> Self {
        Region { id: id.to_string(), label, t_start, t_end }
    }
}

/// Reads a region CSV with header `id,label,t_start_s,t_end_s`.
pub fn parse_regions<R: Read>(reader: R) -> Result<Vec<Region>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| TraceError::Format { line: 1, msg: e.to_string() })?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["id", "label", "t_start_s", "t_end_s"] {
        return Err(TraceError::Format { line: 1, msg: "header must be `id,label,t_start_s,t_end_s`".into() });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TraceError::Format { line: csv_line(e.position()), msg: e.to_string() })?;
        let line = csv_line(rec.position());
        let label = rec[1].parse().map_err(|msg| TraceError::Format { line, msg })?;
        let t_start = parse_f64(&rec[2], line, "t_start_s")?;
        let t_end = parse_f64(&rec[3], line, "t_end_s")?;
        if t_start >= t_end {
            return Err(TraceError::Format { line, msg: format!("region `{}` has t_start >= t_end", &rec[0]) });
        }
        out.push(Region { id: rec[0].to_string(), label, t_start, t_end });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyResult {
    pub joules_total: f64,
    pub joules_per_channel: Vec<f64>,
    pub duration: f64,
    pub mean_watts: f64,
}

impl EnergyResult {
    fn from_channels(joules_per_channel: Vec<f64>, duration: f64) -> Self {
        let joules_total: f64 = joules_per_channel.iter().sum();
        let mean_watts = if duration > 0.0 { joules_total / duration } else { 0.0 };
        EnergyResult { joules_total, joules_per_channel, duration, mean_watts }
    }
}

fn lerp(a: &PowerSample, b: &PowerSample, t: f64, ch: usize) -> f64 {
    let (wa, wb) = (a.channel_watts[ch], b.channel_watts[ch]);
    if b.t == a.t {
        return wa;
    }
    wa + (wb - wa) * (t - a.t) / (b.t - a.t)
}

/// Integrates every channel over the region with the trapezoidal rule,
/// interpolating linearly at the region boundaries.
pub fn integrate(trace: &PowerTrace, region: &Region) -> Result<EnergyResult, TraceError> {
    let (a, b) = (region.t_start, region.t_end);
    let Some((t0, tn)) = trace.span() else {
        return Err(TraceError::EmptyRegion(region.id.clone()));
    };
    if !(a < b) || b <= t0 || a >= tn {
        return Err(TraceError::EmptyRegion(region.id.clone()));
    }
    if a < t0 || b > tn || trace.samples.len() < 2 {
        return Err(TraceError::InsufficientSamples(region.id.clone()));
    }
    let s = &trace.samples;
    // index of the last sample with t <= a, and of the first sample with t >= b
    let lo = s.partition_point(|p| p.t <= a) - 1;
    let hi = s.partition_point(|p| p.t < b);
    let mut joules = vec![0.0; trace.channels()];
    for (ch, j) in joules.iter_mut().enumerate() {
        let mut t_prev = a;
        let mut w_prev = lerp(&s[lo], &s[lo + 1], a, ch);
        for i in lo + 1..hi {
            let (t, w) = (s[i].t, s[i].channel_watts[ch]);
            *j += 0.5 * (w + w_prev) * (t - t_prev);
            t_prev = t;
            w_prev = w;
        }
        let w_end = lerp(&s[hi - 1], &s[hi], b, ch);
        *j += 0.5 * (w_end + w_prev) * (b - t_prev);
    }
    Ok(EnergyResult::from_channels(joules, b - a))
}

/// Energy of `gpu_count` identical devices given one device's measurement.
pub fn scale_energy(e: &EnergyResult, gpu_count: u32) -> EnergyResult {
    let k = gpu_count as f64;
    EnergyResult {
        joules_total: e.joules_total * k,
        joules_per_channel: e.joules_per_channel.iter().map(|j| j * k).collect(),
        duration: e.duration,
        mean_watts: e.mean_watts * k,
    }
}

/// Energy of a mixed set: `Σ count_i × e_i`. Per-channel joules are summed
/// position-wise; the duration is the longest member's.
pub fn scale_energy_heterogeneous(groups: &[(EnergyResult, u32)]) -> EnergyResult {
    let channels = groups.iter().map(|(e, _)| e.joules_per_channel.len()).max().unwrap_or(0);
    let mut per = vec![0.0; channels];
    let mut duration: f64 = 0.0;
    for (e, k) in groups {
        for (p, j) in per.iter_mut().zip(&e.joules_per_channel) {
            *p += *k as f64 * j;
        }
        duration = duration.max(e.duration);
    }
    EnergyResult::from_channels(per, duration)
}

pub fn energy_header(labels: &[String]) -> String {
    let mut s = String::from("id,label,duration_s,joules_total,mean_watts");
    for l in labels {
        s.push_str(&format!(",{l}_j"));
    }
    s
}

pub fn energy_row(region: &Region, e: &EnergyResult) -> String {
    let mut s = format!(
        "{},{},{},{},{}",
        region.id,
        region.label,
        sig6(e.duration),
        sig6(e.joules_total),
        sig6(e.mean_watts)
    );
    for j in &e.joules_per_channel {
        s.push(',');
        s.push_str(&sig6(*j));
    }
    s
}

// ---------------------------------------------------------------------------
// Synthetic traces

/// Power ramps linearly from `start_watts` to `end_watts` over `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub start_watts: f64,
    pub end_watts: f64,
}

impl Segment {
    pub fn constant(t_start: f64, t_end: f64, watts: f64) -> Self {
        Segment { t_start, t_end, start_watts: watts, end_watts: watts }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceProfile {
    /// Non-overlapping, sorted segments. Between two segments the signal is
    /// linear from the end of one to the start of the next.
    pub segments: Vec<Segment>,
    /// The total power is split over channels in proportion to these weights.
    pub channel_weights: Vec<f64>,
    pub channel_labels: Vec<String>,
}

impl TraceProfile {
    pub fn single_channel(segments: Vec<Segment>) -> Self {
        TraceProfile { segments, channel_weights: vec![1.0], channel_labels: vec!["gpu".into()] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise {
    pub sigma_watts: f64,
    pub seed: u64,
}

/// Offset of the second sample placed at a power discontinuity.
pub const JUMP_EPS: f64 = 1e-9;

pub fn generate_synthetic_trace(
    profile: &TraceProfile,
    sample_rate_hz: f64,
    noise: Option<Noise>,
) -> Result<PowerTrace, TraceError> {
    let bad = |m: &str| Err(TraceError::InvalidProfile(m.to_string()));
    if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
        return bad("sample rate must be positive");
    }
    if profile.channel_weights.is_empty()
        || profile.channel_weights.len() != profile.channel_labels.len()
        || profile.channel_weights.iter().any(|w| !(*w >= 0.0))
    {
        return bad("need one nonnegative weight per channel label");
    }
    let wsum: f64 = profile.channel_weights.iter().sum();
    if !(wsum > 0.0) {
        return bad("channel weights sum to zero");
    }
    let mut prev_end = f64::NEG_INFINITY;
    for seg in &profile.segments {
        if !(seg.t_start < seg.t_end) || seg.t_start < prev_end {
            return bad("segments must be sorted, non-empty and non-overlapping");
        }
        if !(seg.start_watts >= 0.0 && seg.end_watts >= 0.0) {
            return bad("segment power must be nonnegative");
        }
        prev_end = seg.t_end;
    }

    let mut points: Vec<(f64, f64)> = Vec::new();
    let dt = 1.0 / sample_rate_hz;
    for seg in &profile.segments {
        let dur = seg.t_end - seg.t_start;
        let n = (dur / dt).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = if i == n { seg.t_end } else { seg.t_start + i as f64 * dt };
            if i < n && t >= seg.t_end {
                continue;
            }
            let w = seg.start_watts + (seg.end_watts - seg.start_watts) * (t - seg.t_start) / dur;
            match points.last() {
                Some(&(pt, pw)) if i == 0 && pt == t => {
                    if pw != w {
                        points.push((t + JUMP_EPS, w));
                    }
                }
                _ => points.push((t, w)),
            }
        }
    }

    let mut rng = noise.map(|n| ChaCha8Rng::seed_from_u64(n.seed));
    let normal = match noise {
        Some(n) if n.sigma_watts > 0.0 => {
            Some(Normal::new(0.0, n.sigma_watts).map_err(|e| TraceError::InvalidProfile(e.to_string()))?)
        }
        _ => None,
    };
    let samples = points
        .into_iter()
        .map(|(t, w)| {
            let channel_watts = profile
                .channel_weights
                .iter()
                .map(|cw| {
                    let mut v = w * cw / wsum;
                    if let (Some(rng), Some(dist)) = (rng.as_mut(), normal.as_ref()) {
                        v = (v + dist.sample(rng)).max(0.0);
                    }
                    v
                })
                .collect();
            PowerSample { t, channel_watts }
        })
        .collect();
    Ok(PowerTrace { channel_labels: profile.channel_labels.clone(), samples })
}
