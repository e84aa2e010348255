//! Data-parallel training over homogeneous or mixed GPU sets: batch
//! splitting, ring all-reduce cost, slowest-device synchronization and
//! energy aggregation.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MultiGpuError {
    #[error("batch {batch} cannot be split evenly over {gpus} GPUs")]
    IndivisibleBatch { batch: u64, gpus: u32 },
    #[error("no joules value for device `{0}`")]
    MissingDevice(String),
    #[error("gpu set line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid gpu set: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpuSet {
    /// (device profile name, count), in declaration order.
    pub members: Vec<(String, u32)>,
    pub link_bandwidth: f64,
    pub link_latency: f64,
}

/// PCIe 3.0 x16, roughly.
pub const DEFAULT_LINK_BANDWIDTH: f64 = 12e9;
pub const DEFAULT_LINK_LATENCY: f64 = 10e-6;

impl GpuSet {
    pub fn new(members: Vec<(String, u32)>, link_bandwidth: f64, link_latency: f64) -> Result<Self, MultiGpuError> {
        let set = GpuSet { members, link_bandwidth, link_latency };
        set.validate()?;
        Ok(set)
    }

    pub fn homogeneous(device: &str, count: u32) -> Self {
        GpuSet {
            members: vec![(device.to_string(), count)],
            link_bandwidth: DEFAULT_LINK_BANDWIDTH,
            link_latency: DEFAULT_LINK_LATENCY,
        }
    }

    pub fn validate(&self) -> Result<(), MultiGpuError> {
        if self.total() < 1 {
            return Err(MultiGpuError::Invalid("a set needs at least one GPU".into()));
        }
        if !(self.link_bandwidth > 0.0) || !self.link_bandwidth.is_finite() {
            return Err(MultiGpuError::Invalid("link bandwidth must be positive".into()));
        }
        if !(self.link_latency >= 0.0) || !self.link_latency.is_finite() {
            return Err(MultiGpuError::Invalid("link latency must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> u32 {
        self.members.iter().map(|(_, c)| c).sum()
    }

    /// Devices with a nonzero count.
    pub fn active(&self) -> impl Iterator<Item = (&str, u32)> {
        self.members.iter().filter(|(_, c)| *c > 0).map(|(d, c)| (d.as_str(), *c))
    }
}

impl fmt::Display for GpuSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.active().map(|(d, c)| format!("{c}x{d}")).collect();
        f.write_str(&parts.join("+"))
    }
}

/// Parses a GPU set file:
///
/// ```text
/// device = titan_x_pascal:2
/// device = titan_x_maxwell:2
/// link_bandwidth = 12e9   # bytes/s
/// link_latency = 1e-5     # seconds per hop
/// ```
pub fn parse_gpu_set(text: &str) -> Result<GpuSet, MultiGpuError> {
    let mut members: Vec<(String, u32)> = Vec::new();
    let (mut bw, mut lat) = (DEFAULT_LINK_BANDWIDTH, DEFAULT_LINK_LATENCY);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| MultiGpuError::Parse { line: i + 1, msg };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
        let v = v.trim();
        match k.trim() {
            "device" => {
                let (name, count) = v.split_once(':').unwrap_or((v, "1"));
                let count: u32 = count.trim().parse().map_err(|_| err(format!("bad count `{count}`")))?;
                let name = name.trim();
                if name.is_empty() {
                    return Err(err("empty device name".into()));
                }
                match members.iter_mut().find(|(d, _)| d == name) {
                    Some((_, c)) => *c += count,
                    None => members.push((name.to_string(), count)),
                }
            }
            "link_bandwidth" => bw = v.parse().map_err(|_| err(format!("bad bandwidth `{v}`")))?,
            "link_latency" => lat = v.parse().map_err(|_| err(format!("bad latency `{v}`")))?,
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    GpuSet::new(members, bw, lat)
}

pub fn split_batch(batch: u64, gpus: u32) -> Result<u64, MultiGpuError> {
    assert!(gpus >= 1, "need at least one GPU");
    if batch % gpus as u64 != 0 {
        return Err(MultiGpuError::IndivisibleBatch { batch, gpus });
    }
    Ok(batch / gpus as u64)
}

/// Ring all-reduce: `2(n−1)/n · bytes/bandwidth + 2(n−1) · latency`.
pub fn ring_allreduce_time(gradient_bytes: f64, n_gpus: u32, set: &GpuSet) -> f64 {
    if n_gpus <= 1 {
        return 0.0;
    }
    let n = n_gpus as f64;
    2.0 * (n - 1.0) / n * gradient_bytes / set.link_bandwidth + 2.0 * (n - 1.0) * set.link_latency
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapPolicy {
    /// Networks with a CTC at or above this threshold hide communication.
    pub ctc_threshold: f64,
    pub high_ctc_overlap: f64,
    pub low_ctc_overlap: f64,
}

impl Default for OverlapPolicy {
    fn default() -> Self {
        OverlapPolicy { ctc_threshold: 15.0, high_ctc_overlap: 1.0, low_ctc_overlap: 0.5 }
    }
}

impl OverlapPolicy {
    /// Heuristic overlap factor ω for a network with the given CTC.
    pub fn omega(&self, ctc: f64) -> f64 {
        if ctc >= self.ctc_threshold {
            self.high_ctc_overlap
        } else {
            self.low_ctc_overlap
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepEstimate {
    pub compute_times: Vec<(String, f64)>,
    pub comm_time: f64,
    pub step_time: f64,
    pub energy_joules: f64,
}

/// `step = max(compute) + (1 − ω)·comm`. Energy is left at zero; fill it with
/// [`set_energy`].
pub fn hetero_step_time(compute: &[(String, f64)], comm_time: f64, omega: f64) -> StepEstimate {
    assert!(!compute.is_empty(), "need at least one device estimate");
    assert!((0.0..=1.0).contains(&omega), "overlap factor must lie in [0, 1]");
    let slowest = compute.iter().map(|(_, t)| *t).fold(f64::NEG_INFINITY, f64::max);
    StepEstimate {
        compute_times: compute.to_vec(),
        comm_time,
        step_time: slowest + (1.0 - omega) * comm_time,
        energy_joules: 0.0,
    }
}

/// `Σ count_i × joules_i` over the set's members.
pub fn set_energy(per_device: &BTreeMap<String, f64>, set: &GpuSet) -> Result<f64, MultiGpuError> {
    let mut total = 0.0;
    for (device, count) in set.active() {
        let j = per_device.get(device).ok_or_else(|| MultiGpuError::MissingDevice(device.to_string()))?;
        total += count as f64 * j;
    }
    Ok(total)
}

/// Bytes exchanged per all-reduce: one gradient per parameter.
pub fn gradient_bytes(parameters: u64, element_bytes: u64) -> f64 {
    (parameters * element_bytes) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(bw: f64, lat: f64) -> GpuSet {
        GpuSet::new(vec![("d".into(), 1)], bw, lat).unwrap()
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_batch(64, 2), Ok(32));
        assert_eq!(split_batch(64, 1), Ok(64));
        assert_eq!(split_batch(64, 3), Err(MultiGpuError::IndivisibleBatch { batch: 64, gpus: 3 }));
    }

    #[test]
    fn ring_examples() {
        let s = set(10e9, 0.0);
        assert_eq!(ring_allreduce_time(1e9, 1, &s), 0.0);
        assert!((ring_allreduce_time(1e9, 2, &s) - 0.1).abs() < 1e-15);
        let with_latency = set(10e9, 1e-3);
        assert!((ring_allreduce_time(0.0, 4, &with_latency) - 6e-3).abs() < 1e-15);
    }

    #[test]
    fn slowest_device_gates_step() {
        let est = hetero_step_time(&[("p".into(), 0.023), ("m".into(), 0.046)], 0.0, 1.0);
        assert_eq!(est.step_time, 0.046);
        let one = hetero_step_time(&[("p".into(), 0.5)], 0.0, 0.5);
        assert_eq!(one.step_time, 0.5);
        let hidden = hetero_step_time(&[("p".into(), 0.5)], 0.2, 1.0);
        assert_eq!(hidden.step_time, 0.5);
        let half = hetero_step_time(&[("p".into(), 0.5)], 0.2, 0.5);
        assert!((half.step_time - 0.6).abs() < 1e-15);
    }

    #[test]
    fn energy_aggregation() {
        let mut j = BTreeMap::new();
        j.insert("pascal".to_string(), 2.222);
        j.insert("maxwell".to_string(), 2.979);
        let four = GpuSet::new(vec![("pascal".into(), 2), ("maxwell".into(), 2)], 1e9, 0.0).unwrap();
        assert!((set_energy(&j, &four).unwrap() - 10.402).abs() < 1e-12);
        assert_eq!(set_energy(&j, &GpuSet::homogeneous("pascal", 1)).unwrap(), 2.222);
        let zero = GpuSet::new(vec![("pascal".into(), 1), ("volta".into(), 0)], 1e9, 0.0).unwrap();
        assert_eq!(set_energy(&j, &zero).unwrap(), 2.222);
        assert_eq!(
            set_energy(&j, &GpuSet::homogeneous("volta", 1)),
            Err(MultiGpuError::MissingDevice("volta".into()))
        );
    }

    #[test]
    fn overlap_policy() {
        let p = OverlapPolicy::default();
        assert_eq!(p.omega(11.6), 0.5);
        assert_eq!(p.omega(18.5), 1.0);
    }

    #[test]
    fn gpu_set_file() {
        let s = parse_gpu_set(
            "# testbed\ndevice = titan_x_pascal:2\ndevice = titan_x_maxwell:2\nlink_bandwidth = 12e9\nlink_latency = 0\n",
        )
        .unwrap();
        assert_eq!(s.total(), 4);
        assert_eq!(s.to_string(), "2xtitan_x_pascal+2xtitan_x_maxwell");
        assert_eq!(s.link_latency, 0.0);
        assert!(matches!(parse_gpu_set("device = a:x"), Err(MultiGpuError::Parse { line: 1, .. })));
        assert!(parse_gpu_set("link_bandwidth = 1").is_err());
        assert!(parse_gpu_set("device = a:1\nlink_bandwidth = 0").is_err());
    }

    proptest! {
        #[test]
        fn split_conserves_samples(sub in 1u64..10_000, n in 1u32..16) {
            let b = sub * n as u64;
            prop_assert_eq!(split_batch(b, n).unwrap() * n as u64, b);
        }

        #[test]
        fn ring_bounds(bytes in 1.0f64..1e10, bw in 1e6f64..1e11, n in 2u32..64) {
            let s = set(bw, 0.0);
            let t = ring_allreduce_time(bytes, n, &s);
            prop_assert!(t > 0.0);
            prop_assert!(t <= 2.0 * bytes / bw);
            prop_assert!(ring_allreduce_time(bytes, n + 1, &s) >= t);
            prop_assert_eq!(ring_allreduce_time(bytes, 1, &s), 0.0);
        }

        #[test]
        fn identical_devices_match_homogeneous(t in 0.0f64..10.0, n in 1usize..8, comm in 0.0f64..1.0, w in 0.0f64..=1.0) {
            let devs: Vec<_> = (0..n).map(|i| (format!("d{i}"), t)).collect();
            let est = hetero_step_time(&devs, comm, w);
            let single = hetero_step_time(&devs[..1], comm, w);
            prop_assert_eq!(est.step_time, single.step_time);
            prop_assert!(est.step_time >= t);
        }

        #[test]
        fn set_energy_is_linear(a in 0.0f64..100.0, b in 0.0f64..100.0, ca in 0u32..8, cb in 0u32..8, k in 1u32..4) {
            prop_assume!(ca + cb > 0);
            let mut j = BTreeMap::new();
            j.insert("a".to_string(), a);
            j.insert("b".to_string(), b);
            let s = GpuSet::new(vec![("a".into(), ca), ("b".into(), cb)], 1.0, 0.0).unwrap();
            let s2 = GpuSet::new(vec![("a".into(), ca * k), ("b".into(), cb * k)], 1.0, 0.0).unwrap();
            let e = set_energy(&j, &s).unwrap();
            prop_assert!((set_energy(&j, &s2).unwrap() - k as f64 * e).abs() <= 1e-9 * (1.0 + e));
            let j2: BTreeMap<_, _> = j.iter().map(|(d, v)| (d.clone(), v * 3.0)).collect();
            prop_assert!((set_energy(&j2, &s).unwrap() - 3.0 * e).abs() <= 1e-9 * (1.0 + e));
        }
    }
}
