//! Architecture descriptions, MAdd accounting and budget-constrained
//! depth/width expansion.
//!
//! One multiply-accumulate counts as two operations. Architectures are
//! written in a small line-oriented language:
//!
//! ```text
//! # comment
//! input channels=3 height=112 width=112
//! conv2d name=stem out=64 kernel=3 stride=1 padding=1 widen=true
//! block name=ir residual=true
//!   batchnorm
//!   conv2d out=c kernel=3 padding=1
//!   conv2d out=c kernel=3 stride=s padding=1
//!   batchnorm
//! end
//! stage name=stage1 block=ir repeat=3 channels=64 stride=2
//! fc out=512
//! ```
//!
//! Inside a block, `out=c` (or `c*K`, `c/K`) refers to the stage width and
//! `stride=s` to the stage stride, which only the first block of a stage
//! uses. A residual block whose output shape differs from its input gets a
//! 1×1 projection convolution plus batch norm on the shortcut. Layers marked
//! `widen=true` have their output channels scaled by the width multiplier.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Bundled ResNet-100 style description (improved residual blocks,
/// stage blocks `[3, 13, 30, 3]`, widths `[64, 128, 256, 512]`, 112×112 input).
pub const R100_ARCH: &str = include_str!("../archs/r100.arch");

#[derive(Debug, Error, PartialEq)]
pub enum FlopsError {
    #[error("shape mismatch in {layer}: {msg}")]
    ShapeMismatch { layer: String, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown block template {0:?}")]
    UnknownBlock(String),
    #[error("layer {0} uses stage parameters outside a block")]
    Unresolved(String),
    #[error("invalid budget query: {0}")]
    InvalidQuery(String),
    #[error("no candidate fits the budget of {0} ops")]
    EmptyResult(u64),
}

pub type Result<T, E = FlopsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: u64,
    pub height: u64,
    pub width: u64,
}

impl Shape {
    pub fn new(channels: u64, height: u64, width: u64) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn elements(&self) -> u64 {
        self.channels * self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A channel count or stride that may refer to the enclosing stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Lit(u64),
    /// `stage_channels * mul / div`
    StageChannels {
        mul: u64,
        div: u64,
    },
    StageStride,
}

impl Param {
    fn resolve(self, ctx: Option<StageCtx>, layer: &str) -> Result<u64> {
        match (self, ctx) {
            (Param::Lit(v), _) => Ok(v),
            (Param::StageChannels { mul, div }, Some(c)) => Ok((c.channels * mul / div).max(1)),
            (Param::StageStride, Some(c)) => Ok(c.stride),
            (_, None) => Err(FlopsError::Unresolved(layer.to_string())),
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::Lit(v) => write!(f, "{v}"),
            Param::StageChannels { mul: 1, div: 1 } => f.write_str("c"),
            Param::StageChannels { mul, div: 1 } => write!(f, "c*{mul}"),
            Param::StageChannels { mul: 1, div } => write!(f, "c/{div}"),
            Param::StageChannels { mul, div } => write!(f, "c*{mul}/{div}"),
            Param::StageStride => f.write_str("s"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct StageCtx {
    channels: u64,
    stride: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        out: Param,
        kernel: u64,
        stride: Param,
        padding: u64,
        bias: bool,
    },
    Fc {
        out: Param,
        bias: bool,
    },
    MaxPool {
        kernel: u64,
        stride: u64,
        padding: u64,
    },
    AvgPoolGlobal,
    Upsample {
        height: u64,
        width: u64,
    },
    BatchNorm,
    Activation,
    Dropout,
    Add,
}

impl LayerKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Fc { .. } => "fc",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPoolGlobal => "avgpool_global",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Activation => "activation",
            LayerKind::Dropout => "dropout",
            LayerKind::Add => "add",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Scale output channels with the width multiplier.
    pub widen: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            widen: false,
        }
    }

    pub fn conv(name: &str, out: u64, kernel: u64, stride: u64, padding: u64) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                out: Param::Lit(out),
                kernel,
                stride: Param::Lit(stride),
                padding,
                bias: false,
            },
        )
    }

    pub fn fc(name: &str, out: u64) -> Self {
        Self::new(
            name,
            LayerKind::Fc {
                out: Param::Lit(out),
                bias: false,
            },
        )
    }
}

/// Ops and output shape of a single layer with literal parameters.
pub fn layer_flops(layer: &LayerSpec, input: Shape) -> Result<(u64, Shape)> {
    layer_flops_in(layer, input, None)
}

fn layer_flops_in(layer: &LayerSpec, input: Shape, ctx: Option<StageCtx>) -> Result<(u64, Shape)> {
    let mismatch = |msg: String| FlopsError::ShapeMismatch {
        layer: layer.name.clone(),
        msg,
    };
    match &layer.kind {
        LayerKind::Conv2d {
            out,
            kernel,
            stride,
            padding,
            bias,
        } => {
            let out = out.resolve(ctx, &layer.name)?;
            let stride = stride.resolve(ctx, &layer.name)?;
            if out == 0 || *kernel == 0 || stride == 0 {
                return Err(mismatch("out, kernel and stride must be positive".into()));
            }
            let h = conv_out(input.height, *kernel, stride, *padding).ok_or_else(|| {
                mismatch(format!(
                    "kernel {kernel} does not fit height {} with padding {padding}",
                    input.height
                ))
            })?;
            let w = conv_out(input.width, *kernel, stride, *padding).ok_or_else(|| {
                mismatch(format!(
                    "kernel {kernel} does not fit width {} with padding {padding}",
                    input.width
                ))
            })?;
            let shape = Shape::new(out, h, w);
            let mut ops = 2 * kernel * kernel * input.channels * shape.elements();
            if *bias {
                ops += shape.elements();
            }
            Ok((ops, shape))
        }
        LayerKind::Fc { out, bias } => {
            let out = out.resolve(ctx, &layer.name)?;
            if out == 0 {
                return Err(mismatch("out must be positive".into()));
            }
            let fan_in = input.elements();
            let ops = 2 * fan_in * out + if *bias { out } else { 0 };
            Ok((ops, Shape::new(out, 1, 1)))
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        } => {
            if *kernel == 0 || *stride == 0 {
                return Err(mismatch("kernel and stride must be positive".into()));
            }
            let h = conv_out(input.height, *kernel, *stride, *padding)
                .ok_or_else(|| mismatch("pool window larger than input".into()))?;
            let w = conv_out(input.width, *kernel, *stride, *padding)
                .ok_or_else(|| mismatch("pool window larger than input".into()))?;
            let shape = Shape::new(input.channels, h, w);
            Ok((shape.elements(), shape))
        }
        LayerKind::AvgPoolGlobal => {
            let shape = Shape::new(input.channels, 1, 1);
            Ok((shape.elements(), shape))
        }
        LayerKind::Upsample { height, width } => {
            if *height == 0 || *width == 0 {
                return Err(mismatch("upsample size must be positive".into()));
            }
            let shape = Shape::new(input.channels, *height, *width);
            Ok((shape.elements(), shape))
        }
        LayerKind::BatchNorm => Ok((2 * input.elements(), input)),
        LayerKind::Activation | LayerKind::Add => Ok((input.elements(), input)),
        LayerKind::Dropout => Ok((0, input)),
    }
}

fn conv_out(size: u64, kernel: u64, stride: u64, padding: u64) -> Option<u64> {
    let padded = size + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTemplate {
    pub name: String,
    pub residual: bool,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub name: String,
    pub block: String,
    pub repeat: u64,
    pub channels: u64,
    pub stride: u64,
    /// Whether the depth multiplier applies to this stage.
    pub scale_depth: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchItem {
    Layer(LayerSpec),
    Stage(StageSpec),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub input: Shape,
    pub blocks: BTreeMap<String, BlockTemplate>,
    pub items: Vec<ArchItem>,
}

/// Per-item row of a flops report (a top-level layer or a whole stage).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsEntry {
    pub name: String,
    pub kind: String,
    pub flops: u64,
    pub output: Shape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub total: u64,
    pub output: Shape,
    pub entries: Vec<FlopsEntry>,
}

impl ArchSpec {
    pub fn new(input: Shape) -> Self {
        Self {
            input,
            blocks: BTreeMap::new(),
            items: Vec::new(),
        }
    }

    pub fn stages(&self) -> impl Iterator<Item = &StageSpec> {
        self.items.iter().filter_map(|i| match i {
            ArchItem::Stage(s) => Some(s),
            ArchItem::Layer(_) => None,
        })
    }

    pub fn stage_repeats(&self) -> Vec<u64> {
        self.stages().map(|s| s.repeat).collect()
    }

    pub fn stage_channels(&self) -> Vec<u64> {
        self.stages().map(|s| s.channels).collect()
    }

    pub fn report(&self) -> Result<FlopsReport> {
        let mut shape = self.input;
        let mut total = 0u64;
        let mut entries = Vec::with_capacity(self.items.len());
        for (idx, item) in self.items.iter().enumerate() {
            let (flops, out, name, kind) = match item {
                ArchItem::Layer(layer) => {
                    let (f, out) = layer_flops(layer, shape)?;
                    let name = if layer.name.is_empty() {
                        format!("{}{idx}", layer.kind.keyword())
                    } else {
                        layer.name.clone()
                    };
                    (f, out, name, layer.kind.keyword().to_string())
                }
                ArchItem::Stage(stage) => {
                    let block = self
                        .blocks
                        .get(&stage.block)
                        .ok_or_else(|| FlopsError::UnknownBlock(stage.block.clone()))?;
                    let (f, out) = stage_flops(stage, block, shape)?;
                    (
                        f,
                        out,
                        stage.name.clone(),
                        format!("stage[{}x{}]", stage.repeat, stage.block),
                    )
                }
            };
            total += flops;
            shape = out;
            entries.push(FlopsEntry {
                name,
                kind,
                flops,
                output: out,
            });
        }
        Ok(FlopsReport {
            total,
            output: shape,
            entries,
        })
    }

    /// Copy with stage depths and widths scaled.
    pub fn scaled(&self, depth_mult: f64, width_mult: f64, channel_round: u64) -> ArchSpec {
        let mut out = self.clone();
        for item in &mut out.items {
            match item {
                ArchItem::Stage(stage) => {
                    if stage.scale_depth && stage.repeat > 0 {
                        stage.repeat = ((stage.repeat as f64 * depth_mult).round() as u64).max(1);
                    }
                    stage.channels = round_channels(stage.channels, width_mult, channel_round);
                }
                ArchItem::Layer(layer) if layer.widen => match &mut layer.kind {
                    LayerKind::Conv2d {
                        out: Param::Lit(c), ..
                    }
                    | LayerKind::Fc {
                        out: Param::Lit(c), ..
                    } => {
                        *c = round_channels(*c, width_mult, channel_round);
                    }
                    _ => {}
                },
                ArchItem::Layer(_) => {}
            }
        }
        out
    }
}

/// Scales a channel count and rounds to the nearest positive multiple of `round`.
pub fn round_channels(channels: u64, mult: f64, round: u64) -> u64 {
    let round = round.max(1);
    let units = (channels as f64 * mult / round as f64).round() as u64;
    units.max(1) * round
}

fn stage_flops(stage: &StageSpec, block: &BlockTemplate, input: Shape) -> Result<(u64, Shape)> {
    let mut shape = input;
    let mut total = 0;
    for b in 0..stage.repeat {
        let ctx = StageCtx {
            channels: stage.channels,
            stride: if b == 0 { stage.stride } else { 1 },
        };
        let block_in = shape;
        for layer in &block.layers {
            let (f, out) = layer_flops_in(layer, shape, Some(ctx))?;
            total += f;
            shape = out;
        }
        if block.residual {
            if shape != block_in {
                let proj = LayerSpec::conv(
                    &format!("{}.{b}.shortcut", stage.name),
                    shape.channels,
                    1,
                    ctx.stride,
                    0,
                );
                let (f, out) = layer_flops(&proj, block_in)?;
                if out != shape {
                    return Err(FlopsError::ShapeMismatch {
                        layer: proj.name,
                        msg: format!("shortcut gives {out}, block gives {shape}"),
                    });
                }
                total += f + 2 * out.elements();
            }
            total += shape.elements();
        }
    }
    Ok((total, shape))
}

/// Total ops of the fully unrolled architecture.
pub fn arch_flops(arch: &ArchSpec) -> Result<u64> {
    Ok(arch.report()?.total)
}

/// Grid of depth/width multipliers and the ops budget they must respect.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetQuery {
    pub budget: u64,
    pub depth_multipliers: Vec<f64>,
    pub width_multipliers: Vec<f64>,
    /// Channels are rounded to multiples of this.
    pub channel_round: u64,
}

impl BudgetQuery {
    pub fn new(budget: u64, depth_multipliers: Vec<f64>, width_multipliers: Vec<f64>) -> Self {
        Self {
            budget,
            depth_multipliers,
            width_multipliers,
            channel_round: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlopsError::InvalidQuery(m.into()));
        if self.budget == 0 {
            return bad("budget must be positive");
        }
        if self.depth_multipliers.is_empty() || self.width_multipliers.is_empty() {
            return bad("multiplier grids must be non-empty");
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.depth_multipliers.iter().all(positive)
            || !self.width_multipliers.iter().all(positive)
        {
            return bad("multipliers must be positive");
        }
        if self.channel_round == 0 {
            return bad("channel_round must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub depth_mult: f64,
    pub width_mult: f64,
    pub arch: ArchSpec,
    pub flops: u64,
}

impl Candidate {
    pub fn repeats(&self) -> Vec<u64> {
        self.arch.stage_repeats()
    }

    pub fn channels(&self) -> Vec<u64> {
        self.arch.stage_channels()
    }
}

/// Every grid point whose expanded architecture fits the budget, sorted by
/// flops descending; ties keep grid order (depth-major).
pub fn expand_under_budget(base: &ArchSpec, q: &BudgetQuery) -> Result<Vec<Candidate>> {
    q.validate()?;
    base.report()?;
    let mut out = Vec::new();
    for &d in &q.depth_multipliers {
        for &w in &q.width_multipliers {
            let arch = base.scaled(d, w, q.channel_round);
            let flops = arch_flops(&arch)?;
            if flops <= q.budget {
                out.push(Candidate {
                    depth_mult: d,
                    width_mult: w,
                    arch,
                    flops,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(FlopsError::EmptyResult(q.budget));
    }
    out.sort_by_key(|c| std::cmp::Reverse(c.flops));
    Ok(out)
}

// ---- text format ----

struct Tokens<'a> {
    line: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Tokens<'a> {
    fn parse(line: usize, rest: &[&'a str]) -> Result<Self> {
        let pairs = rest
            .iter()
            .map(|t| {
                t.split_once('=').ok_or_else(|| FlopsError::Parse {
                    line,
                    msg: format!("expected key=value, got {t:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { line, pairs })
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        let pos = self.pairs.iter().position(|(k, _)| *k == key)?;
        Some(self.pairs.remove(pos).1)
    }

    fn err(&self, msg: impl Into<String>) -> FlopsError {
        FlopsError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn num(&mut self, key: &str, default: Option<u64>) -> Result<u64> {
        match self.take(key) {
            Some(v) => v
                .parse()
                .map_err(|_| self.err(format!("{key}={v} is not a non-negative integer"))),
            None => default.ok_or_else(|| self.err(format!("missing {key}="))),
        }
    }

    fn flag(&mut self, key: &str) -> Result<bool> {
        match self.take(key) {
            None | Some("false") => Ok(false),
            Some("true") => Ok(true),
            Some(v) => Err(self.err(format!("{key}={v} is not true/false"))),
        }
    }

    fn param(&mut self, key: &str, default: Option<Param>) -> Result<Param> {
        let Some(v) = self.take(key) else {
            return default.ok_or_else(|| self.err(format!("missing {key}=")));
        };
        parse_param(v).ok_or_else(|| self.err(format!("bad value {key}={v}")))
    }

    fn finish(self) -> Result<()> {
        match self.pairs.first() {
            None => Ok(()),
            Some((k, _)) => Err(self.err(format!("unknown key {k:?}"))),
        }
    }
}

fn parse_param(v: &str) -> Option<Param> {
    if v == "s" {
        return Some(Param::StageStride);
    }
    if let Some(rest) = v.strip_prefix('c') {
        let (mul, div) = match rest {
            "" => (1, 1),
            r => {
                let (m, d) = match r.strip_prefix('*') {
                    Some(r) => match r.split_once('/') {
                        Some((m, d)) => (m.parse().ok()?, d.parse().ok()?),
                        None => (r.parse().ok()?, 1),
                    },
                    None => (1, r.strip_prefix('/')?.parse().ok()?),
                };
                (m, d)
            }
        };
        return (mul > 0 && div > 0).then_some(Param::StageChannels { mul, div });
    }
    v.parse().ok().map(Param::Lit)
}

fn parse_layer(keyword: &str, mut t: Tokens<'_>) -> Result<Option<LayerSpec>> {
    let name = t.take("name").unwrap_or_default().to_string();
    let widen = t.flag("widen")?;
    let kind = match keyword {
        "conv2d" => LayerKind::Conv2d {
            out: t.param("out", None)?,
            kernel: t.num("kernel", None)?,
            stride: t.param("stride", Some(Param::Lit(1)))?,
            padding: t.num("padding", Some(0))?,
            bias: t.flag("bias")?,
        },
        "fc" => LayerKind::Fc {
            out: t.param("out", None)?,
            bias: t.flag("bias")?,
        },
        "maxpool" => {
            let kernel = t.num("kernel", None)?;
            LayerKind::MaxPool {
                kernel,
                stride: t.num("stride", Some(kernel))?,
                padding: t.num("padding", Some(0))?,
            }
        }
        "avgpool_global" => LayerKind::AvgPoolGlobal,
        "upsample" => LayerKind::Upsample {
            height: t.num("height", None)?,
            width: t.num("width", None)?,
        },
        "batchnorm" => LayerKind::BatchNorm,
        "activation" => LayerKind::Activation,
        "dropout" => LayerKind::Dropout,
        "add" => LayerKind::Add,
        _ => return Ok(None),
    };
    t.finish()?;
    Ok(Some(LayerSpec { name, kind, widen }))
}

impl FromStr for ArchSpec {
    type Err = FlopsError;

    fn from_str(text: &str) -> Result<Self> {
        let mut input = None;
        let mut blocks = BTreeMap::new();
        let mut items = Vec::new();
        let mut open: Option<BlockTemplate> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            let keyword = words[0];
            let mut t = Tokens::parse(line, &words[1..])?;
            let perr = |msg: String| FlopsError::Parse { line, msg };

            if keyword == "end" {
                let block = open
                    .take()
                    .ok_or_else(|| perr("`end` without `block`".into()))?;
                blocks.insert(block.name.clone(), block);
                continue;
            }
            if let Some(block) = open.as_mut() {
                let layer = parse_layer(keyword, t)?
                    .ok_or_else(|| perr(format!("unknown layer {keyword:?}")))?;
                block.layers.push(layer);
                continue;
            }
            match keyword {
                "input" => {
                    let shape = Shape::new(
                        t.num("channels", None)?,
                        t.num("height", None)?,
                        t.num("width", None)?,
                    );
                    t.finish()?;
                    if input.replace(shape).is_some() {
                        return Err(perr("duplicate input line".into()));
                    }
                }
                "block" => {
                    let name = t
                        .take("name")
                        .ok_or_else(|| perr("block needs name=".into()))?
                        .to_string();
                    let residual = t.flag("residual")?;
                    t.finish()?;
                    open = Some(BlockTemplate {
                        name,
                        residual,
                        layers: Vec::new(),
                    });
                }
                "stage" => {
                    let name = t.take("name").unwrap_or_default().to_string();
                    let block = t
                        .take("block")
                        .ok_or_else(|| perr("stage needs block=".into()))?
                        .to_string();
                    let repeat = t.num("repeat", None)?;
                    let channels = t.num("channels", None)?;
                    let stride = t.num("stride", Some(1))?;
                    let scale_depth = match t.take("scale_depth") {
                        None | Some("true") => true,
                        Some("false") => false,
                        Some(v) => return Err(perr(format!("scale_depth={v} is not true/false"))),
                    };
                    t.finish()?;
                    if !blocks.contains_key(&block) {
                        return Err(FlopsError::UnknownBlock(block));
                    }
                    let name = if name.is_empty() {
                        format!("stage{}", items.len())
                    } else {
                        name
                    };
                    items.push(ArchItem::Stage(StageSpec {
                        name,
                        block,
                        repeat,
                        channels,
                        stride,
                        scale_depth,
                    }));
                }
                other => {
                    let layer = parse_layer(other, t)?
                        .ok_or_else(|| perr(format!("unknown keyword {other:?}")))?;
                    items.push(ArchItem::Layer(layer));
                }
            }
        }
        if open.is_some() {
            return Err(FlopsError::Parse {
                line: text.lines().count(),
                msg: "unterminated block".into(),
            });
        }
        let input = input.ok_or(FlopsError::Parse {
            line: 0,
            msg: "missing input line".into(),
        })?;
        Ok(ArchSpec {
            input,
            blocks,
            items,
        })
    }
}

fn write_layer(f: &mut fmt::Formatter<'_>, indent: &str, l: &LayerSpec) -> fmt::Result {
    write!(f, "{indent}{}", l.kind.keyword())?;
    if !l.name.is_empty() {
        write!(f, " name={}", l.name)?;
    }
    match &l.kind {
        LayerKind::Conv2d {
            out,
            kernel,
            stride,
            padding,
            bias,
        } => {
            write!(
                f,
                " out={out} kernel={kernel} stride={stride} padding={padding}"
            )?;
            if *bias {
                f.write_str(" bias=true")?;
            }
        }
        LayerKind::Fc { out, bias } => {
            write!(f, " out={out}")?;
            if *bias {
                f.write_str(" bias=true")?;
            }
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        } => write!(f, " kernel={kernel} stride={stride} padding={padding}")?,
        LayerKind::Upsample { height, width } => write!(f, " height={height} width={width}")?,
        _ => {}
    }
    if l.widen {
        f.write_str(" widen=true")?;
    }
    writeln!(f)
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self.input;
        writeln!(
            f,
            "input channels={} height={} width={}",
            i.channels, i.height, i.width
        )?;
        for b in self.blocks.values() {
            writeln!(f, "block name={} residual={}", b.name, b.residual)?;
            for l in &b.layers {
                write_layer(f, "  ", l)?;
            }
            writeln!(f, "end")?;
        }
        for item in &self.items {
            match item {
                ArchItem::Layer(l) => write_layer(f, "", l)?,
                ArchItem::Stage(s) => {
                    write!(
                        f,
                        "stage name={} block={} repeat={} channels={} stride={}",
                        s.name, s.block, s.repeat, s.channels, s.stride
                    )?;
                    if !s.scale_depth {
                        f.write_str(" scale_depth=false")?;
                    }
                    writeln!(f)?;
                }
            }
        }
        Ok(())
    }
}

/// Renders an ops count as `24.22G` style text.
pub fn human_flops(ops: u64) -> String {
    let v = ops as f64;
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        ops.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_example() {
        // 1→1 channel, 3×3, output 4×4: input 6×6 without padding
        let l = LayerSpec::conv("c", 1, 3, 1, 0);
        let (ops, out) = layer_flops(&l, Shape::new(1, 6, 6)).unwrap();
        assert_eq!(ops, 288);
        assert_eq!(out, Shape::new(1, 4, 4));
    }

    #[test]
    fn conv_bias_adds_one_op_per_output() {
        let mut l = LayerSpec::conv("c", 2, 3, 1, 1);
        if let LayerKind::Conv2d { bias, .. } = &mut l.kind {
            *bias = true;
        }
        let (ops, out) = layer_flops(&l, Shape::new(1, 4, 4)).unwrap();
        assert_eq!(out, Shape::new(2, 4, 4));
        assert_eq!(ops, 2 * 9 * 2 * 16 + 32);
    }

    #[test]
    fn fc_example() {
        let (ops, out) = layer_flops(&LayerSpec::fc("fc", 256), Shape::new(512, 1, 1)).unwrap();
        assert_eq!(ops, 262_144);
        assert_eq!(out, Shape::new(256, 1, 1));
    }

    #[test]
    fn elementwise_layers() {
        let s = Shape::new(8, 4, 4);
        assert_eq!(
            layer_flops(&LayerSpec::new("a", LayerKind::Activation), s)
                .unwrap()
                .0,
            128
        );
        assert_eq!(
            layer_flops(&LayerSpec::new("b", LayerKind::BatchNorm), s)
                .unwrap()
                .0,
            256
        );
        assert_eq!(
            layer_flops(&LayerSpec::new("d", LayerKind::Dropout), s)
                .unwrap()
                .0,
            0
        );
        assert_eq!(
            layer_flops(&LayerSpec::new("p", LayerKind::AvgPoolGlobal), s).unwrap(),
            (8, Shape::new(8, 1, 1))
        );
        let pool = LayerSpec::new(
            "m",
            LayerKind::MaxPool {
                kernel: 2,
                stride: 2,
                padding: 0,
            },
        );
        assert_eq!(layer_flops(&pool, s).unwrap(), (32, Shape::new(8, 2, 2)));
    }

    #[test]
    fn stem_enrichment_upsample() {
        let arch: ArchSpec = "input channels=3 height=112 width=112\n\
                              upsample height=235 width=235\n\
                              conv2d out=32 kernel=13 stride=2 padding=0\n"
            .parse()
            .unwrap();
        let r = arch.report().unwrap();
        assert_eq!(r.output, Shape::new(32, 112, 112));
        assert_eq!(r.entries[0].flops, 3 * 235 * 235);
    }

    #[test]
    fn shape_mismatch() {
        let err =
            layer_flops(&LayerSpec::conv("big", 4, 7, 1, 0), Shape::new(1, 3, 3)).unwrap_err();
        assert!(matches!(err, FlopsError::ShapeMismatch { .. }));
    }

    #[test]
    fn empty_arch_is_zero() {
        let arch: ArchSpec = "input channels=3 height=8 width=8".parse().unwrap();
        let r = arch.report().unwrap();
        assert_eq!(r.total, 0);
        assert_eq!(r.output, Shape::new(3, 8, 8));
    }

    #[test]
    fn additivity() {
        let a = LayerSpec::conv("a", 4, 3, 1, 1);
        let b = LayerSpec::conv("b", 8, 3, 2, 1);
        let input = Shape::new(2, 10, 10);
        let (fa, sa) = layer_flops(&a, input).unwrap();
        let (fb, _) = layer_flops(&b, sa).unwrap();
        let mut arch = ArchSpec::new(input);
        arch.items = vec![ArchItem::Layer(a), ArchItem::Layer(b)];
        assert_eq!(arch_flops(&arch).unwrap(), fa + fb);
    }

    #[test]
    fn residual_block_counts_projection_and_add() {
        let text = "input channels=4 height=8 width=8\n\
                    block name=b residual=true\n  conv2d out=c kernel=3 stride=s padding=1\nend\n\
                    stage name=s1 block=b repeat=2 channels=8 stride=2\n";
        let arch: ArchSpec = text.parse().unwrap();
        let first_conv = 2 * 9 * 4 * 8 * 16;
        let proj = 2 * 4 * 8 * 16 + 2 * 8 * 16;
        let add = 8 * 16;
        let second = 2 * 9 * 8 * 8 * 16 + add;
        assert_eq!(arch_flops(&arch).unwrap(), first_conv + proj + add + second);
    }

    #[test]
    fn stage_params_outside_block_are_rejected() {
        let arch: ArchSpec = "input channels=3 height=8 width=8\nconv2d out=c kernel=1"
            .parse()
            .unwrap();
        assert!(matches!(arch.report(), Err(FlopsError::Unresolved(_))));
    }

    #[test]
    fn parse_errors() {
        let e = "input channels=3 height=8 width=8\nconv2d kernel=3"
            .parse::<ArchSpec>()
            .unwrap_err();
        assert!(matches!(e, FlopsError::Parse { line: 2, .. }));
        let e = "input channels=3 height=8 width=8\nstage block=nope repeat=1 channels=4"
            .parse::<ArchSpec>();
        assert!(matches!(e, Err(FlopsError::UnknownBlock(_))));
        let e = "conv2d out=3 kernel=1".parse::<ArchSpec>();
        assert!(matches!(e, Err(FlopsError::Parse { .. })));
        let e = "input channels=3 height=8 width=8\nfoo x=1".parse::<ArchSpec>();
        assert!(matches!(e, Err(FlopsError::Parse { line: 2, .. })));
    }

    #[test]
    fn text_round_trip() {
        let arch: ArchSpec = R100_ARCH.parse().unwrap();
        let again: ArchSpec = arch.to_string().parse().unwrap();
        assert_eq!(arch, again);
    }

    #[test]
    fn channel_rounding() {
        assert_eq!(round_channels(64, 1.125, 1), 72);
        assert_eq!(round_channels(64, 0.92, 1), 59);
        assert_eq!(round_channels(64, 0.92, 8), 56);
        assert_eq!(round_channels(3, 0.01, 8), 8);
    }

    #[test]
    fn human_units() {
        assert_eq!(human_flops(24_220_000_000), "24.22G");
        assert_eq!(human_flops(81_900_000), "81.90M");
        assert_eq!(human_flops(12), "12");
    }
}
