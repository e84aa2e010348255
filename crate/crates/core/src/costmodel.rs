//! Per-layer operation counts and data volumes, network totals, the
//! computation-to-communication ratio and batch scaling.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use thiserror::Error;

use crate::arch::{LayerKind, LayerSpec, PoolKind, ShapedNetwork, TensorShape, LRN_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("layer `{layer}`: shapes {input} -> {output} are inconsistent with the layer")]
    ShapeMismatch { layer: String, input: TensorShape, output: TensorShape },
}

/// Operation counts by type. A multiply–accumulate counts as one operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub macc: u64,
    pub max_ops: u64,
    pub add_div: u64,
    pub exp_add_div: u64,
    pub mul01: u64,
    pub bias_add: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.macc + self.max_ops + self.add_div + self.exp_add_div + self.mul01 + self.bias_add
    }

    pub fn scaled(&self, k: u64) -> OpCount {
        OpCount {
            macc: self.macc * k,
            max_ops: self.max_ops * k,
            add_div: self.add_div * k,
            exp_add_div: self.exp_add_div * k,
            mul01: self.mul01 * k,
            bias_add: self.bias_add * k,
        }
    }
}

impl Add for OpCount {
    type Output = OpCount;
    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            macc: self.macc + o.macc,
            max_ops: self.max_ops + o.max_ops,
            add_div: self.add_div + o.add_div,
            exp_add_div: self.exp_add_div + o.exp_add_div,
            mul01: self.mul01 + o.mul01,
            bias_add: self.bias_add + o.bias_add,
        }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, o: OpCount) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataVolume {
    pub read_elems: u64,
    pub written_elems: u64,
    pub element_bytes: u64,
}

impl DataVolume {
    pub fn read_bytes(&self) -> u64 {
        self.read_elems * self.element_bytes
    }

    pub fn written_bytes(&self) -> u64 {
        self.written_elems * self.element_bytes
    }
}

/// How weights contribute to the data read by a layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum WeightMode {
    /// Every stored weight is read once: `k_w·k_h·(ch_in/groups)·ch_out` for
    /// convolutions and `in·units` for fully connected and classifier layers.
    #[default]
    Physical,
    /// Weight term `(k_w·k_h)·ch_in` for kernel layers only, without the
    /// output-channel factor.
    Literal,
}

pub const DEFAULT_ELEMENT_BYTES: u64 = 4;
/// Bytes per megabyte in reports (binary megabytes).
pub const BYTES_PER_MB: f64 = 1_048_576.0;

fn check(layer: &LayerSpec, input: TensorShape, output: TensorShape, expected: TensorShape) -> Result<(), CostError> {
    if output != expected || !input.is_valid() {
        return Err(CostError::ShapeMismatch { layer: layer.name.clone(), input, output });
    }
    Ok(())
}

fn expected_output(layer: &LayerSpec, input: TensorShape) -> Option<TensorShape> {
    use crate::arch::window_output;
    Some(match &layer.kind {
        LayerKind::Conv { filters, kernel_w, kernel_h, stride, padding, groups, .. } => {
            if input.channels % groups != 0 {
                return None;
            }
            TensorShape::new(
                window_output(input.width, *kernel_w, *stride, *padding)?,
                window_output(input.height, *kernel_h, *stride, *padding)?,
                *filters,
            )
        }
        LayerKind::Pool { kernel_w, kernel_h, stride, padding, .. } => TensorShape::new(
            window_output(input.width, *kernel_w, *stride, *padding)?,
            window_output(input.height, *kernel_h, *stride, *padding)?,
            input.channels,
        ),
        LayerKind::FullyConnected { units } | LayerKind::Softmax { units } => {
            TensorShape::new(1, 1, *units)
        }
        _ => input,
    })
}

fn validated(layer: &LayerSpec, input: TensorShape, output: TensorShape) -> Result<(), CostError> {
    match expected_output(layer, input) {
        Some(e) => check(layer, input, output, e),
        None => Err(CostError::ShapeMismatch { layer: layer.name.clone(), input, output }),
    }
}

pub fn layer_ops(layer: &LayerSpec, input: TensorShape, output: TensorShape) -> Result<OpCount, CostError> {
    validated(layer, input, output)?;
    let in_elems = input.elems();
    let out_spatial = output.width * output.height;
    let mut ops = OpCount::default();
    match &layer.kind {
        LayerKind::Conv { filters, kernel_w, kernel_h, groups, bias, .. } => {
            ops.macc = kernel_w * kernel_h * out_spatial * input.channels * filters / groups;
            if *bias {
                ops.bias_add = *filters;
            }
        }
        LayerKind::FullyConnected { units } => ops.macc = in_elems * units,
        LayerKind::Pool { kernel_w, kernel_h, kind, .. } => {
            let n = kernel_w * kernel_h * out_spatial * input.channels;
            match kind {
                PoolKind::Max => ops.max_ops = n,
                PoolKind::Average => ops.add_div = n,
            }
        }
        LayerKind::Relu => ops.max_ops = in_elems,
        LayerKind::Dropout => ops.mul01 = in_elems,
        LayerKind::BatchNorm => ops.add_div = 2 * in_elems,
        LayerKind::Softmax { units } => {
            ops.macc = in_elems * units;
            ops.exp_add_div = 3 * units;
        }
        LayerKind::ResidualSum { .. } => ops.add_div = in_elems,
        LayerKind::LocalResponseNorm => {
            ops.macc = in_elems * LRN_SIZE;
            ops.exp_add_div = in_elems;
            ops.add_div = in_elems;
        }
    }
    Ok(ops)
}

pub fn layer_data(
    layer: &LayerSpec,
    input: TensorShape,
    output: TensorShape,
    mode: WeightMode,
    element_bytes: u64,
) -> Result<DataVolume, CostError> {
    validated(layer, input, output)?;
    let in_elems = input.elems();
    let weights = match (&layer.kind, mode) {
        (LayerKind::Conv { filters, kernel_w, kernel_h, groups, .. }, WeightMode::Physical) => {
            kernel_w * kernel_h * (input.channels / groups) * filters
        }
        (LayerKind::FullyConnected { units }, WeightMode::Physical)
        | (LayerKind::Softmax { units }, WeightMode::Physical) => in_elems * units,
        (LayerKind::Conv { kernel_w, kernel_h, .. }, WeightMode::Literal)
        | (LayerKind::Pool { kernel_w, kernel_h, .. }, WeightMode::Literal) => {
            kernel_w * kernel_h * input.channels
        }
        _ => 0,
    };
    let activations = match layer.kind {
        LayerKind::ResidualSum { .. } => 2 * in_elems,
        _ => in_elems,
    };
    Ok(DataVolume {
        read_elems: activations + weights,
        written_elems: output.elems(),
        element_bytes,
    })
}

/// Number of trainable parameters (weights and biases). Batch-norm scale and
/// shift are ignored.
pub fn parameter_count(net: &ShapedNetwork) -> u64 {
    net.per_layer
        .iter()
        .map(|l| match &l.spec.kind {
            LayerKind::Conv { filters, kernel_w, kernel_h, groups, bias, .. } => {
                kernel_w * kernel_h * (l.input.channels / groups) * filters
                    + if *bias { *filters } else { 0 }
            }
            LayerKind::FullyConnected { units } | LayerKind::Softmax { units } => {
                l.input.elems() * units + units
            }
            _ => 0,
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub ops: OpCount,
    pub data: DataVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSummary {
    pub network: String,
    pub per_layer: Vec<LayerCost>,
    pub ops: OpCount,
    pub total_ops: u64,
    pub read_elems: u64,
    pub written_elems: u64,
    pub element_bytes: u64,
}

impl CostSummary {
    pub fn total_read_bytes(&self) -> u64 {
        self.read_elems * self.element_bytes
    }

    pub fn total_written_bytes(&self) -> u64 {
        self.written_elems * self.element_bytes
    }

    pub fn read_mb(&self) -> f64 {
        self.total_read_bytes() as f64 / BYTES_PER_MB
    }

    pub fn written_mb(&self) -> f64 {
        self.total_written_bytes() as f64 / BYTES_PER_MB
    }

    /// Operations per element read; `None` when nothing is read.
    pub fn ctc(&self) -> Option<f64> {
        (self.read_elems > 0).then(|| self.total_ops as f64 / self.read_elems as f64)
    }
}

pub fn network_cost(net: &ShapedNetwork, element_bytes: u64) -> Result<CostSummary, CostError> {
    network_cost_with(net, element_bytes, WeightMode::Physical)
}

pub fn network_cost_with(
    net: &ShapedNetwork,
    element_bytes: u64,
    mode: WeightMode,
) -> Result<CostSummary, CostError> {
    let mut per_layer = Vec::with_capacity(net.per_layer.len());
    let mut ops = OpCount::default();
    let (mut read, mut written) = (0u64, 0u64);
    for l in &net.per_layer {
        let o = layer_ops(&l.spec, l.input, l.output)?;
        let d = layer_data(&l.spec, l.input, l.output, mode, element_bytes)?;
        ops += o;
        read += d.read_elems;
        written += d.written_elems;
        per_layer.push(LayerCost { name: l.spec.name.clone(), kind: l.spec.kind.name(), ops: o, data: d });
    }
    Ok(CostSummary {
        network: net.spec.name.clone(),
        per_layer,
        ops,
        total_ops: ops.total(),
        read_elems: read,
        written_elems: written,
        element_bytes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchCost {
    pub batch: u64,
    pub ops: u64,
    pub read_elems: u64,
    pub written_elems: u64,
}

pub fn batch_cost(summary: &CostSummary, batch: u64) -> BatchCost {
    assert!(batch >= 1, "batch size must be positive");
    BatchCost {
        batch,
        ops: summary.total_ops * batch,
        read_elems: summary.read_elems * batch,
        written_elems: summary.written_elems * batch,
    }
}

pub const REPORT_HEADER: &str =
    "layer,kind,macc,max_ops,add_div,exp_add_div,mul01,bias_add,read_bytes,written_bytes";

/// CSV report: one row per layer, then a `total` row. With `batch > 1` every
/// count is multiplied by the batch size.
pub fn report_csv(summary: &CostSummary, batch: u64) -> String {
    let mut s = String::new();
    s.push_str(REPORT_HEADER);
    s.push('\n');
    let row = |s: &mut String, name: &str, kind: &str, o: OpCount, r: u64, w: u64| {
        let o = o.scaled(batch);
        let _ = writeln!(
            s,
            "{name},{kind},{},{},{},{},{},{},{},{}",
            o.macc,
            o.max_ops,
            o.add_div,
            o.exp_add_div,
            o.mul01,
            o.bias_add,
            r * batch,
            w * batch
        );
    };
    for l in &summary.per_layer {
        row(&mut s, &l.name, l.kind, l.ops, l.data.read_bytes(), l.data.written_bytes());
    }
    row(
        &mut s,
        "total",
        "",
        summary.ops,
        summary.total_read_bytes(),
        summary.total_written_bytes(),
    );
    s
}
