//! CNN architectures as ordered layer lists, shape inference, the four
//! built-in networks and the line-oriented architecture file format.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArchError {
    #[error("unknown network `{0}`")]
    UnknownNetwork(String),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("invalid network: {0}")]
    Semantic(String),
    #[error("layer `{layer}`: kernel {kernel} does not fit padded input {padded}")]
    NonPositiveOutput { layer: String, kernel: u64, padded: u64 },
    #[error("layer `{layer}`: groups={groups} does not divide {channels} channels")]
    GroupMismatch { layer: String, groups: u64, channels: u64 },
    #[error("layer `{layer}`: residual inputs differ ({left} vs {right})")]
    ShapeConflict { layer: String, left: TensorShape, right: TensorShape },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub width: u64,
    pub height: u64,
    pub channels: u64,
}

impl TensorShape {
    pub fn new(width: u64, height: u64, channels: u64) -> Self {
        TensorShape { width, height, channels }
    }

    pub fn elems(&self) -> u64 {
        self.width * self.height * self.channels
    }

    pub fn is_valid(&self) -> bool {
        self.width >= 1 && self.height >= 1 && self.channels >= 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

impl PoolKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolKind::Max => "max",
            PoolKind::Average => "average",
        }
    }
}

/// Source of the skip connection of a residual sum.
pub const NETWORK_INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        filters: u64,
        kernel_w: u64,
        kernel_h: u64,
        stride: u64,
        padding: u64,
        groups: u64,
        bias: bool,
    },
    FullyConnected {
        units: u64,
    },
    Pool {
        kernel_w: u64,
        kernel_h: u64,
        stride: u64,
        padding: u64,
        kind: PoolKind,
    },
    Relu,
    Dropout,
    BatchNorm,
    /// Classifier layer: projection onto `units` classes followed by softmax.
    Softmax {
        units: u64,
    },
    /// Element-wise sum of the previous layer's output and the output of
    /// layer `from` (or the network input).
    ResidualSum {
        from: String,
    },
    /// Cross-channel normalization over a fixed window of
    /// [`LRN_SIZE`] channels.
    LocalResponseNorm,
}

pub const LRN_SIZE: u64 = 5;

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Relu => "relu",
            LayerKind::Dropout => "dropout",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Softmax { .. } => "softmax",
            LayerKind::ResidualSum { .. } => "residual_sum",
            LayerKind::LocalResponseNorm => "local_response_norm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }

    pub fn conv(name: &str, filters: u64, k: u64, stride: u64, padding: u64) -> Self {
        Self::new(
            name,
            LayerKind::Conv {
                filters,
                kernel_w: k,
                kernel_h: k,
                stride,
                padding,
                groups: 1,
                bias: true,
            },
        )
    }

    pub fn pool(name: &str, k: u64, stride: u64, padding: u64, kind: PoolKind) -> Self {
        Self::new(
            name,
            LayerKind::Pool { kernel_w: k, kernel_h: k, stride, padding, kind },
        )
    }

    pub fn fc(name: &str, units: u64) -> Self {
        Self::new(name, LayerKind::FullyConnected { units })
    }

    pub fn softmax(name: &str, units: u64) -> Self {
        Self::new(name, LayerKind::Softmax { units })
    }

    pub fn simple(name: &str, kind: LayerKind) -> Self {
        Self::new(name, kind)
    }

    fn with_groups(mut self, g: u64) -> Self {
        if let LayerKind::Conv { groups, .. } = &mut self.kind {
            *groups = g;
        }
        self
    }

    fn without_bias(mut self) -> Self {
        if let LayerKind::Conv { bias, .. } = &mut self.kind {
            *bias = false;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub input: TensorShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks the structural invariants that do not need shape information.
    pub fn validate(&self) -> Result<(), ArchError> {
        if !self.input.is_valid() {
            return Err(ArchError::Semantic(format!(
                "input shape {} has a zero dimension",
                self.input
            )));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.name.is_empty() || layer.name == NETWORK_INPUT {
                return Err(ArchError::Semantic(format!(
                    "invalid layer name `{}`",
                    layer.name
                )));
            }
            if !seen.insert(layer.name.as_str()) {
                return Err(ArchError::Semantic(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            let bad = |what: &str| {
                Err(ArchError::Semantic(format!("layer `{}`: {what} must be positive", layer.name)))
            };
            match &layer.kind {
                LayerKind::Conv { filters, kernel_w, kernel_h, stride, groups, .. } => {
                    if *filters == 0 {
                        return bad("filters");
                    }
                    if *kernel_w == 0 || *kernel_h == 0 {
                        return bad("kernel");
                    }
                    if *stride == 0 {
                        return bad("stride");
                    }
                    if *groups == 0 {
                        return bad("groups");
                    }
                    if filters % groups != 0 {
                        return Err(ArchError::GroupMismatch {
                            layer: layer.name.clone(),
                            groups: *groups,
                            channels: *filters,
                        });
                    }
                }
                LayerKind::Pool { kernel_w, kernel_h, stride, .. } => {
                    if *kernel_w == 0 || *kernel_h == 0 {
                        return bad("kernel");
                    }
                    if *stride == 0 {
                        return bad("stride");
                    }
                }
                LayerKind::FullyConnected { units } | LayerKind::Softmax { units } => {
                    if *units == 0 {
                        return bad("units");
                    }
                }
                LayerKind::ResidualSum { from } => {
                    if from != NETWORK_INPUT
                        && !self.layers[..i].iter().any(|l| &l.name == from)
                    {
                        return Err(ArchError::Semantic(format!(
                            "layer `{}`: residual source `{from}` is not an earlier layer",
                            layer.name
                        )));
                    }
                }
                _ => {}
            }
            if matches!(layer.kind, LayerKind::Softmax { .. }) && i + 1 != self.layers.len() {
                return Err(ArchError::Semantic(format!(
                    "softmax `{}` must be the last layer",
                    layer.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapedLayer {
    pub spec: LayerSpec,
    pub input: TensorShape,
    pub output: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapedNetwork {
    pub spec: NetworkSpec,
    pub per_layer: Vec<ShapedLayer>,
}

impl ShapedNetwork {
    pub fn output(&self) -> TensorShape {
        self.per_layer.last().map(|l| l.output).unwrap_or(self.spec.input)
    }
}

/// Output extent of a sliding window along one axis: `floor((w - k + 2p) / s) + 1`.
pub fn window_output(input: u64, kernel: u64, stride: u64, padding: u64) -> Option<u64> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn windowed(
    layer: &str,
    input: TensorShape,
    kw: u64,
    kh: u64,
    stride: u64,
    pad: u64,
    channels: u64,
) -> Result<TensorShape, ArchError> {
    let err = |k: u64, w: u64| ArchError::NonPositiveOutput {
        layer: layer.to_string(),
        kernel: k,
        padded: w + 2 * pad,
    };
    let w = window_output(input.width, kw, stride, pad).ok_or_else(|| err(kw, input.width))?;
    let h = window_output(input.height, kh, stride, pad).ok_or_else(|| err(kh, input.height))?;
    Ok(TensorShape::new(w, h, channels))
}

pub fn infer_shapes(net: &NetworkSpec) -> Result<ShapedNetwork, ArchError> {
    net.validate()?;
    let mut per_layer: Vec<ShapedLayer> = Vec::with_capacity(net.layers.len());
    let mut current = net.input;
    for layer in &net.layers {
        let output = match &layer.kind {
            LayerKind::Conv { filters, kernel_w, kernel_h, stride, padding, groups, .. } => {
                if current.channels % groups != 0 {
                    return Err(ArchError::GroupMismatch {
                        layer: layer.name.clone(),
                        groups: *groups,
                        channels: current.channels,
                    });
                }
                windowed(&layer.name, current, *kernel_w, *kernel_h, *stride, *padding, *filters)?
            }
            LayerKind::Pool { kernel_w, kernel_h, stride, padding, .. } => windowed(
                &layer.name,
                current,
                *kernel_w,
                *kernel_h,
                *stride,
                *padding,
                current.channels,
            )?,
            LayerKind::FullyConnected { units } | LayerKind::Softmax { units } => {
                TensorShape::new(1, 1, *units)
            }
            LayerKind::ResidualSum { from } => {
                let skip = if from == NETWORK_INPUT {
                    net.input
                } else {
                    per_layer
                        .iter()
                        .find(|l| &l.spec.name == from)
                        .map(|l| l.output)
                        .expect("validated residual source")
                };
                if skip != current {
                    return Err(ArchError::ShapeConflict {
                        layer: layer.name.clone(),
                        left: current,
                        right: skip,
                    });
                }
                current
            }
            LayerKind::Relu
            | LayerKind::Dropout
            | LayerKind::BatchNorm
            | LayerKind::LocalResponseNorm => current,
        };
        per_layer.push(ShapedLayer { spec: layer.clone(), input: current, output });
        current = output;
    }
    Ok(ShapedNetwork { spec: net.clone(), per_layer })
}

// ---------------------------------------------------------------------------
// Built-in networks

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    TwoDCnn,
    ResnetGait,
    CaffeNet,
    ResnetIm,
}

impl Builtin {
    pub const ALL: [Builtin; 4] =
        [Builtin::ResnetGait, Builtin::TwoDCnn, Builtin::CaffeNet, Builtin::ResnetIm];

    pub fn id(&self) -> &'static str {
        match self {
            Builtin::TwoDCnn => "two_d_cnn",
            Builtin::ResnetGait => "resnet_gait",
            Builtin::CaffeNet => "caffenet",
            Builtin::ResnetIm => "resnet_im",
        }
    }

    /// 155 identities for the gait networks (TUM-GAID training split),
    /// 1000 ImageNet classes for the image networks.
    pub fn default_classes(&self) -> u64 {
        match self {
            Builtin::TwoDCnn | Builtin::ResnetGait => 155,
            Builtin::CaffeNet | Builtin::ResnetIm => 1000,
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, Builtin::ResnetGait | Builtin::ResnetIm)
    }
}

impl FromStr for Builtin {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Builtin::ALL
            .into_iter()
            .find(|b| b.id() == s)
            .ok_or_else(|| ArchError::UnknownNetwork(s.to_string()))
    }
}

pub fn builtin_network(name: &str) -> Result<NetworkSpec, ArchError> {
    Ok(build(name.parse()?, None))
}

pub fn builtin_network_with_classes(name: &str, classes: u64) -> Result<NetworkSpec, ArchError> {
    Ok(build(name.parse()?, Some(classes)))
}

pub fn build(which: Builtin, classes: Option<u64>) -> NetworkSpec {
    let classes = classes.unwrap_or_else(|| which.default_classes());
    let relu = |n: &str| LayerSpec::simple(n, LayerKind::Relu);
    let drop = |n: &str| LayerSpec::simple(n, LayerKind::Dropout);
    let bn = |n: &str| LayerSpec::simple(n, LayerKind::BatchNorm);
    let lrn = |n: &str| LayerSpec::simple(n, LayerKind::LocalResponseNorm);
    let maxpool = |n: &str, k, s, p| LayerSpec::pool(n, k, s, p, PoolKind::Max);

    let (input, layers) = match which {
        Builtin::TwoDCnn => (
            TensorShape::new(60, 60, 50),
            vec![
                LayerSpec::conv("conv1", 96, 7, 1, 0),
                relu("relu1"),
                maxpool("pool1", 2, 2, 0),
                LayerSpec::conv("conv2", 192, 5, 2, 0),
                relu("relu2"),
                maxpool("pool2", 2, 2, 0),
                LayerSpec::conv("conv3", 512, 3, 1, 0),
                relu("relu3"),
                maxpool("pool3", 2, 2, 0),
                LayerSpec::conv("conv4", 4096, 2, 1, 0),
                relu("relu4"),
                LayerSpec::fc("fc5", 4096),
                relu("relu5"),
                drop("drop5"),
                LayerSpec::fc("fc6", 2048),
                relu("relu6"),
                drop("drop6"),
                LayerSpec::softmax("softmax", classes),
            ],
        ),
        Builtin::CaffeNet => (
            TensorShape::new(227, 227, 3),
            vec![
                LayerSpec::conv("conv1", 96, 11, 4, 0),
                relu("relu1"),
                maxpool("pool1", 3, 2, 0),
                lrn("norm1"),
                LayerSpec::conv("conv2", 256, 5, 1, 2).with_groups(2),
                relu("relu2"),
                maxpool("pool2", 3, 2, 0),
                lrn("norm2"),
                LayerSpec::conv("conv3", 384, 3, 1, 1),
                relu("relu3"),
                LayerSpec::conv("conv4", 384, 3, 1, 1).with_groups(2),
                relu("relu4"),
                LayerSpec::conv("conv5", 256, 3, 1, 1).with_groups(2),
                relu("relu5"),
                maxpool("pool5", 3, 2, 0),
                LayerSpec::fc("fc6", 4096),
                relu("relu6"),
                drop("drop6"),
                LayerSpec::fc("fc7", 4096),
                relu("relu7"),
                drop("drop7"),
                LayerSpec::softmax("softmax", classes),
            ],
        ),
        Builtin::ResnetGait => {
            let mut layers = vec![
                LayerSpec::conv("conv1", 64, 7, 2, 0),
                bn("bn1"),
                relu("relu1"),
                maxpool("pool1", 3, 2, 0),
            ];
            for (i, (filters, count)) in [(64, 4), (128, 6), (256, 7), (512, 2)].into_iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                layers.extend(expand_resblock(&format!("res{}", i + 1), filters, count, stride));
            }
            layers.push(LayerSpec::pool("pool_global", 2, 1, 0, PoolKind::Average));
            layers.push(LayerSpec::softmax("softmax", classes));
            (TensorShape::new(60, 60, 50), layers)
        }
        Builtin::ResnetIm => {
            let mut layers = vec![
                LayerSpec::conv("conv1", 64, 7, 2, 3),
                bn("bn1"),
                relu("relu1"),
                maxpool("pool1", 3, 2, 1),
            ];
            for (i, (filters, count)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                layers.extend(expand_resblock(&format!("res{}", i + 1), filters, count, stride));
            }
            layers.push(LayerSpec::pool("pool_global", 7, 1, 0, PoolKind::Average));
            layers.push(LayerSpec::softmax("softmax", classes));
            (TensorShape::new(224, 224, 3), layers)
        }
    };
    NetworkSpec { name: which.id().to_string(), input, layers }
}

/// Expands a group of residual blocks: a 1×1 adapter conv (no bias) with the
/// given stride, then `count` blocks of
/// conv–bn–relu–conv–bn–residual_sum–relu with 3×3 convolutions.
pub fn expand_resblock(
    name: &str,
    filters: u64,
    count: u64,
    adapter_stride: u64,
) -> Vec<LayerSpec> {
    let mut out = Vec::with_capacity(1 + 7 * count as usize);
    let adapter = format!("{name}_adapt");
    out.push(LayerSpec::conv(&adapter, filters, 1, adapter_stride, 0).without_bias());
    let mut source = adapter;
    for j in 1..=count {
        let p = format!("{name}_{j}");
        out.push(LayerSpec::conv(&format!("{p}_conv1"), filters, 3, 1, 1).without_bias());
        out.push(LayerSpec::simple(&format!("{p}_bn1"), LayerKind::BatchNorm));
        out.push(LayerSpec::simple(&format!("{p}_relu1"), LayerKind::Relu));
        out.push(LayerSpec::conv(&format!("{p}_conv2"), filters, 3, 1, 1).without_bias());
        out.push(LayerSpec::simple(&format!("{p}_bn2"), LayerKind::BatchNorm));
        out.push(LayerSpec::simple(
            &format!("{p}_sum"),
            LayerKind::ResidualSum { from: source.clone() },
        ));
        let relu = format!("{p}_relu2");
        out.push(LayerSpec::simple(&relu, LayerKind::Relu));
        source = relu;
    }
    out
}

// ---------------------------------------------------------------------------
// Text format

fn kind_from_token(tok: &str) -> Option<&'static str> {
    Some(match tok {
        "conv" => "conv",
        "fully_connected" | "fc" => "fully_connected",
        "pool" => "pool",
        "relu" => "relu",
        "dropout" => "dropout",
        "batch_norm" | "bn" => "batch_norm",
        "softmax" => "softmax",
        "residual_sum" | "sum" => "residual_sum",
        "local_response_norm" | "lrn" => "local_response_norm",
        "resblock" => "resblock",
        _ => return None,
    })
}

const KNOWN_KEYS: [&str; 12] = [
    "filters", "units", "k", "kw", "kh", "stride", "pad", "groups", "bias", "type", "from", "count",
];

struct Keys<'a> {
    line: usize,
    pairs: Vec<(&'a str, &'a str)>,
    used: Vec<bool>,
}

impl<'a> Keys<'a> {
    fn syntax(&self, msg: String) -> ArchError {
        ArchError::Syntax { line: self.line, msg }
    }

    fn raw(&mut self, key: &str) -> Option<&'a str> {
        let idx = self.pairs.iter().position(|(k, _)| *k == key)?;
        self.used[idx] = true;
        Some(self.pairs[idx].1)
    }

    fn int(&mut self, key: &str) -> Result<Option<u64>, ArchError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| self.syntax(format!("`{key}` expects a nonnegative integer, got `{v}`"))),
        }
    }

    fn req(&mut self, key: &str) -> Result<u64, ArchError> {
        self.int(key)?.ok_or_else(|| self.syntax(format!("missing `{key}=`")))
    }

    fn kernel(&mut self) -> Result<(u64, u64), ArchError> {
        let k = self.int("k")?;
        let kw = self.int("kw")?.or(k);
        let kh = self.int("kh")?.or(k);
        match (kw, kh) {
            (Some(w), Some(h)) => Ok((w, h)),
            _ => Err(self.syntax("missing kernel size (`k=` or `kw=`/`kh=`)".into())),
        }
    }

    fn finish(&self) -> Result<(), ArchError> {
        for ((k, _), used) in self.pairs.iter().zip(&self.used) {
            if !used {
                return Err(self.syntax(format!("key `{k}` is not valid here")));
            }
        }
        Ok(())
    }
}

/// Parses an architecture file. See the README for the format.
pub fn parse_network(text: &str) -> Result<NetworkSpec, ArchError> {
    parse_network_named(text, "network")
}

pub fn parse_network_named(text: &str, name: &str) -> Result<NetworkSpec, ArchError> {
    let mut input: Option<TensorShape> = None;
    let mut net_name = name.to_string();
    let mut layers = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        let syntax = |msg: String| ArchError::Syntax { line, msg };
        if toks[0] == "name" {
            if toks.len() != 2 || input.is_some() {
                return Err(syntax("`name <id>` must precede `input`".into()));
            }
            net_name = toks[1].to_string();
            continue;
        }
        if input.is_none() {
            if toks[0] != "input" || toks.len() != 4 {
                return Err(syntax("expected `input <w> <h> <ch>` first".into()));
            }
            let mut dims = [0u64; 3];
            for (d, t) in dims.iter_mut().zip(&toks[1..]) {
                *d = t
                    .parse()
                    .map_err(|_| syntax(format!("bad input dimension `{t}`")))?;
            }
            input = Some(TensorShape::new(dims[0], dims[1], dims[2]));
            continue;
        }
        let kind = kind_from_token(toks[0])
            .ok_or_else(|| syntax(format!("unknown layer kind `{}`", toks[0])))?;
        let lname = toks
            .get(1)
            .filter(|t| !t.contains('='))
            .ok_or_else(|| syntax("missing layer name".into()))?
            .to_string();
        let mut pairs = Vec::new();
        for t in &toks[2..] {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key=value, got `{t}`")))?;
            if !KNOWN_KEYS.contains(&k) {
                return Err(syntax(format!("unknown key `{k}`")));
            }
            if pairs.iter().any(|(pk, _)| *pk == k) {
                return Err(syntax(format!("duplicate key `{k}`")));
            }
            pairs.push((k, v));
        }
        let used = vec![false; pairs.len()];
        let mut keys = Keys { line, pairs, used };
        match kind {
            "conv" => {
                let filters = keys.req("filters")?;
                let (kw, kh) = keys.kernel()?;
                let stride = keys.int("stride")?.unwrap_or(1);
                let padding = keys.int("pad")?.unwrap_or(0);
                let groups = keys.int("groups")?.unwrap_or(1);
                let bias = match keys.raw("bias") {
                    None | Some("true") => true,
                    Some("false") => false,
                    Some(v) => return Err(keys.syntax(format!("`bias` expects true/false, got `{v}`"))),
                };
                layers.push(LayerSpec::new(
                    lname,
                    LayerKind::Conv { filters, kernel_w: kw, kernel_h: kh, stride, padding, groups, bias },
                ));
            }
            "pool" => {
                let (kw, kh) = keys.kernel()?;
                let stride = keys.int("stride")?.unwrap_or(1);
                let padding = keys.int("pad")?.unwrap_or(0);
                let kind = match keys.raw("type") {
                    None | Some("max") => PoolKind::Max,
                    Some("average") | Some("avg") => PoolKind::Average,
                    Some(v) => return Err(keys.syntax(format!("unknown pool type `{v}`"))),
                };
                layers.push(LayerSpec::new(
                    lname,
                    LayerKind::Pool { kernel_w: kw, kernel_h: kh, stride, padding, kind },
                ));
            }
            "fully_connected" => {
                let units = keys.req("units")?;
                layers.push(LayerSpec::new(lname, LayerKind::FullyConnected { units }));
            }
            "softmax" => {
                let units = keys.req("units")?;
                layers.push(LayerSpec::new(lname, LayerKind::Softmax { units }));
            }
            "residual_sum" => {
                let from = keys
                    .raw("from")
                    .ok_or_else(|| keys.syntax("missing `from=`".into()))?
                    .to_string();
                layers.push(LayerSpec::new(lname, LayerKind::ResidualSum { from }));
            }
            "relu" => layers.push(LayerSpec::new(lname, LayerKind::Relu)),
            "dropout" => layers.push(LayerSpec::new(lname, LayerKind::Dropout)),
            "batch_norm" => layers.push(LayerSpec::new(lname, LayerKind::BatchNorm)),
            "local_response_norm" => layers.push(LayerSpec::new(lname, LayerKind::LocalResponseNorm)),
            "resblock" => {
                let filters = keys.req("filters")?;
                let count = keys.req("count")?;
                let stride = keys.int("stride")?.unwrap_or(1);
                if count == 0 {
                    return Err(keys.syntax("`count` must be positive".into()));
                }
                layers.extend(expand_resblock(&lname, filters, count, stride));
            }
            _ => unreachable!(),
        }
        keys.finish()?;
    }
    let input = input.ok_or_else(|| ArchError::Syntax {
        line: text.lines().count().max(1),
        msg: "missing `input <w> <h> <ch>` line".into(),
    })?;
    let net = NetworkSpec { name: net_name, input, layers };
    net.validate()?;
    Ok(net)
}

/// Emits the canonical text form: every key spelled out, residual blocks expanded.
pub fn emit_network(net: &NetworkSpec) -> String {
    let mut s = String::new();
    s.push_str(&format!("name {}\n", net.name));
    s.push_str(&format!(
        "input {} {} {}\n",
        net.input.width, net.input.height, net.input.channels
    ));
    for l in &net.layers {
        let kernel = |w: u64, h: u64| {
            if w == h {
                format!("k={w}")
            } else {
                format!("kw={w} kh={h}")
            }
        };
        let body = match &l.kind {
            LayerKind::Conv { filters, kernel_w, kernel_h, stride, padding, groups, bias } => format!(
                " filters={filters} {} stride={stride} pad={padding} groups={groups} bias={bias}",
                kernel(*kernel_w, *kernel_h)
            ),
            LayerKind::Pool { kernel_w, kernel_h, stride, padding, kind } => format!(
                " {} stride={stride} pad={padding} type={}",
                kernel(*kernel_w, *kernel_h),
                kind.as_str()
            ),
            LayerKind::FullyConnected { units } | LayerKind::Softmax { units } => {
                format!(" units={units}")
            }
            LayerKind::ResidualSum { from } => format!(" from={from}"),
            _ => String::new(),
        };
        s.push_str(&format!("{} {}{}\n", l.kind.name(), l.name, body));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts kernel placements along one axis by explicit enumeration over the
    /// padded input.
    fn placements(w: u64, k: u64, s: u64, p: u64) -> u64 {
        let padded = w + 2 * p;
        let mut n = 0;
        let mut start = 0;
        while start + k <= padded {
            n += 1;
            start += s;
        }
        n
    }

    #[test]
    fn identity_conv() {
        let net = parse_network("input 1 1 1\nconv c filters=1 k=1").unwrap();
        let shaped = infer_shapes(&net).unwrap();
        assert_eq!(shaped.output(), TensorShape::new(1, 1, 1));
    }

    #[test]
    fn caffenet_conv1_placements() {
        assert_eq!(placements(227, 11, 4, 0), 55);
        assert_eq!(window_output(227, 11, 4, 0), Some(55));
        let net = parse_network("input 227 227 3\nconv conv1 filters=96 k=11 stride=4").unwrap();
        assert_eq!(infer_shapes(&net).unwrap().output(), TensorShape::new(55, 55, 96));
    }

    #[test]
    fn gait_conv1_placements() {
        assert_eq!(placements(60, 7, 1, 0), 54);
        assert_eq!(window_output(60, 7, 1, 0), Some(54));
    }

    #[test]
    fn minimal_document() {
        let net = parse_network("input 60 60 50\nconv conv1 filters=96 k=7 stride=1 pad=0").unwrap();
        assert_eq!(net.layers.len(), 1);
        assert_eq!(net.input, TensorShape::new(60, 60, 50));
    }

    #[test]
    fn malformed_conv_rejected() {
        let err = parse_network("input 8 8 1\nconv c1 k=0").unwrap_err();
        assert!(matches!(err, ArchError::Syntax { line: 2, .. }), "{err:?}");
        let err = parse_network("input 8 8 1\nconv c1 filters=4 k=0").unwrap_err();
        assert!(matches!(err, ArchError::Semantic(_)), "{err:?}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_network("# comment\ninput 8 8 1\n\nwat x").unwrap_err();
        assert_eq!(err, ArchError::Syntax { line: 4, msg: "unknown layer kind `wat`".into() });
        let err = parse_network("conv c filters=1 k=1").unwrap_err();
        assert!(matches!(err, ArchError::Syntax { line: 1, .. }));
        let err = parse_network("input 8 8 1\nconv c filters=1 k=1 foo=2").unwrap_err();
        assert!(matches!(err, ArchError::Syntax { line: 2, .. }));
        let err = parse_network("input 8 8 1\nrelu r stride=2").unwrap_err();
        assert!(matches!(err, ArchError::Syntax { line: 2, .. }));
    }

    #[test]
    fn aliases_parse_to_canonical_kinds() {
        let net = parse_network(
            "input 4 4 2\nbn b\nlrn n\nsum s from=input\nfc f units=3",
        )
        .unwrap();
        let kinds: Vec<_> = net.layers.iter().map(|l| l.kind.name()).collect();
        assert_eq!(kinds, ["batch_norm", "local_response_norm", "residual_sum", "fully_connected"]);
    }

    #[test]
    fn invariants_enforced() {
        assert!(matches!(
            parse_network("input 4 4 2\nrelu a\nrelu a"),
            Err(ArchError::Semantic(_))
        ));
        assert!(matches!(
            parse_network("input 4 4 2\nsoftmax s units=3\nrelu a"),
            Err(ArchError::Semantic(_))
        ));
        assert!(matches!(
            parse_network("input 4 4 2\nsum s from=later\nrelu later"),
            Err(ArchError::Semantic(_))
        ));
    }

    #[test]
    fn shape_errors() {
        let net = parse_network("input 4 4 3\nconv c filters=4 k=5").unwrap();
        assert!(matches!(infer_shapes(&net), Err(ArchError::NonPositiveOutput { .. })));
        let net = parse_network("input 4 4 3\nconv c filters=4 k=1 groups=2").unwrap();
        assert!(matches!(infer_shapes(&net), Err(ArchError::GroupMismatch { .. })));
        let net = parse_network("input 4 4 3\nconv c filters=3 k=3\nsum s from=input").unwrap();
        assert!(matches!(infer_shapes(&net), Err(ArchError::ShapeConflict { .. })));
    }

    #[test]
    fn builtins_shape_and_end_in_classifier() {
        for b in Builtin::ALL {
            let net = build(b, None);
            let shaped = infer_shapes(&net).unwrap();
            let last = shaped.per_layer.last().unwrap();
            assert!(matches!(last.spec.kind, LayerKind::Softmax { .. }));
            assert_eq!(last.output, TensorShape::new(1, 1, b.default_classes()));
            if b.is_residual() {
                // the classifier sees a globally pooled 1×1 feature map
                assert_eq!(last.input.width, 1);
                assert_eq!(last.input.height, 1);
            }
        }
        assert!(matches!(builtin_network("vgg"), Err(ArchError::UnknownNetwork(_))));
        let net = builtin_network_with_classes("resnet_gait", 305).unwrap();
        assert_eq!(infer_shapes(&net).unwrap().output().channels, 305);
    }

    #[test]
    fn builtin_skeletons() {
        let count = |net: &NetworkSpec, f: &dyn Fn(&LayerKind) -> bool| {
            net.layers.iter().filter(|l| f(&l.kind)).count()
        };
        let two_d = build(Builtin::TwoDCnn, None);
        assert_eq!(count(&two_d, &|k| matches!(k, LayerKind::Conv { .. })), 4);
        assert_eq!(count(&two_d, &|k| matches!(k, LayerKind::FullyConnected { .. })), 2);
        assert_eq!(two_d.input, TensorShape::new(60, 60, 50));

        let caffe = build(Builtin::CaffeNet, None);
        let grouped: Vec<_> = caffe
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { groups: 2, .. }))
            .map(|l| l.name.as_str())
            .collect();
        assert_eq!(grouped, ["conv2", "conv4", "conv5"]);
        assert_eq!(count(&caffe, &|k| matches!(k, LayerKind::FullyConnected { .. })), 2);

        let resim = build(Builtin::ResnetIm, None);
        assert_eq!(count(&resim, &|k| matches!(k, LayerKind::ResidualSum { .. })), 3 + 4 + 6 + 3);
        let gait = build(Builtin::ResnetGait, None);
        assert_eq!(count(&gait, &|k| matches!(k, LayerKind::ResidualSum { .. })), 4 + 6 + 7 + 2);
    }

    #[test]
    fn round_trip_builtins() {
        for b in Builtin::ALL {
            let net = build(b, None);
            let text = emit_network(&net);
            let back = parse_network(&text).unwrap();
            assert_eq!(back, net);
            assert_eq!(emit_network(&back), text);
        }
    }

    #[test]
    fn resblock_macro_matches_expansion() {
        let net = parse_network("input 8 8 4\nresblock g filters=4 count=2").unwrap();
        assert_eq!(net.layers, expand_resblock("g", 4, 2, 1));
        let shaped = infer_shapes(&net).unwrap();
        assert_eq!(shaped.output(), TensorShape::new(8, 8, 4));
    }

    proptest! {
        #[test]
        fn closed_form_matches_placement_count(w in 1u64..=8, k in 1u64..=8, s in 1u64..=8, p in 0u64..=8) {
            let brute = placements(w, k, s, p);
            match window_output(w, k, s, p) {
                Some(n) => prop_assert_eq!(n, brute),
                None => prop_assert_eq!(brute, 0),
            }
        }

        #[test]
        fn shape_inference_agrees_with_enumeration(
            w in 1u64..=8, h in 1u64..=8, c in 1u64..=4,
            k in 1u64..=8, s in 1u64..=4, p in 0u64..=3, pool in any::<bool>(),
        ) {
            let layer = if pool {
                LayerSpec::pool("l", k, s, p, PoolKind::Max)
            } else {
                LayerSpec::conv("l", 3, k, s, p)
            };
            let net = NetworkSpec { name: "n".into(), input: TensorShape::new(w, h, c), layers: vec![layer] };
            let (bw, bh) = (placements(w, k, s, p), placements(h, k, s, p));
            match infer_shapes(&net) {
                Ok(shaped) => {
                    let out = shaped.output();
                    prop_assert_eq!((out.width, out.height), (bw, bh));
                    prop_assert_eq!(out.channels, if pool { c } else { 3 });
                }
                Err(ArchError::NonPositiveOutput { .. }) => prop_assert!(bw == 0 || bh == 0),
                Err(e) => prop_assert!(false, "unexpected {e:?}"),
            }
        }
    }
}
