//! The RepVGG-A/B architecture family and instantiated models.
//!
//! A model is five stages of 3x3 blocks (the first block of every stage has stride 2)
//! followed by global average pooling and a fully-connected head. Stage widths are
//! `[min(64, 64a), 64a, 128a, 256a, 512b]`. With `g > 1`, the odd-numbered layers
//! 3, 5, ..., 21 (plus 23, 25, 27 for the B variant) are groupwise; layer numbering is
//! 1-based over every conv layer including stage 1.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward_train, RepVggBlock};
use crate::error::{Error, Result};
use crate::reparam::FusedConv;
use crate::tensor::{
    batch_norm_infer, conv2d, fully_connected, global_avg_pool, BnParams, ConvParams, Linear,
    Scalar, Tensor4, DEFAULT_BN_EPS,
};
use crate::tensor::relu_in_place;
use crate::winograd::WinogradKernel;

const BASE_WIDTHS: [f64; 5] = [64.0, 64.0, 128.0, 256.0, 512.0];
const A_LAYERS: [usize; 5] = [1, 2, 4, 14, 1];
const B_LAYERS: [usize; 5] = [1, 4, 6, 16, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    /// Arbitrary stage layout, used for desk-scale experiments.
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Deploy,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Deploy => "deploy",
        })
    }
}

/// Named configurations from the published model table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    A0,
    A1,
    A2,
    B0,
    B1,
    B1g2,
    B1g4,
    B2,
    B2g2,
    B2g4,
    B3,
    B3g4,
}

impl Preset {
    pub const ALL: [Preset; 12] = [
        Preset::A0,
        Preset::A1,
        Preset::A2,
        Preset::B0,
        Preset::B1,
        Preset::B1g2,
        Preset::B1g4,
        Preset::B2,
        Preset::B2g2,
        Preset::B2g4,
        Preset::B3,
        Preset::B3g4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::A0 => "A0",
            Preset::A1 => "A1",
            Preset::A2 => "A2",
            Preset::B0 => "B0",
            Preset::B1 => "B1",
            Preset::B1g2 => "B1g2",
            Preset::B1g4 => "B1g4",
            Preset::B2 => "B2",
            Preset::B2g2 => "B2g2",
            Preset::B2g4 => "B2g4",
            Preset::B3 => "B3",
            Preset::B3g4 => "B3g4",
        }
    }

    /// `(variant, a, b, g)`.
    pub fn config(self) -> (Variant, f64, f64, usize) {
        use Variant::*;
        match self {
            Preset::A0 => (A, 0.75, 2.5, 1),
            Preset::A1 => (A, 1.0, 2.5, 1),
            Preset::A2 => (A, 1.5, 2.75, 1),
            Preset::B0 => (B, 1.0, 2.5, 1),
            Preset::B1 => (B, 2.0, 4.0, 1),
            Preset::B1g2 => (B, 2.0, 4.0, 2),
            Preset::B1g4 => (B, 2.0, 4.0, 4),
            Preset::B2 => (B, 2.5, 5.0, 1),
            Preset::B2g2 => (B, 2.5, 5.0, 2),
            Preset::B2g4 => (B, 2.5, 5.0, 4),
            Preset::B3 => (B, 3.0, 5.0, 1),
            Preset::B3g4 => (B, 3.0, 5.0, 4),
        }
    }

    pub fn spec(self, num_classes: usize) -> ModelSpec {
        let (variant, a, b, g) = self.config();
        let mut spec = build_spec(variant, a, b, g, num_classes).expect("preset widths are valid");
        spec.name = format!("RepVGG-{}", self.name());
        spec
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim();
        let key = match key.get(..7) {
            Some(prefix) if prefix.eq_ignore_ascii_case("repvgg-") => &key[7..],
            _ => key,
        };
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(key))
            .ok_or_else(|| Error::Spec(format!("unknown preset {s:?}")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture description. Always valid once constructed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct ModelSpec {
    name: String,
    variant: Variant,
    layers_per_stage: Vec<usize>,
    widths: Vec<usize>,
    a: Option<f64>,
    b: Option<f64>,
    groups: usize,
    groupwise_layers: Vec<usize>,
    num_classes: usize,
    input_channels: usize,
    bn_eps: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    name: String,
    variant: Variant,
    layers_per_stage: Vec<usize>,
    widths: Vec<usize>,
    a: Option<f64>,
    b: Option<f64>,
    groups: usize,
    groupwise_layers: Vec<usize>,
    num_classes: usize,
    input_channels: usize,
    bn_eps: f64,
}

impl TryFrom<RawSpec> for ModelSpec {
    type Error = Error;

    fn try_from(r: RawSpec) -> Result<Self> {
        let spec = ModelSpec {
            name: r.name,
            variant: r.variant,
            layers_per_stage: r.layers_per_stage,
            widths: r.widths,
            a: r.a,
            b: r.b,
            groups: r.groups,
            groupwise_layers: r.groupwise_layers,
            num_classes: r.num_classes,
            input_channels: r.input_channels,
            bn_eps: r.bn_eps,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<ModelSpec> for RawSpec {
    fn from(s: ModelSpec) -> Self {
        RawSpec {
            name: s.name,
            variant: s.variant,
            layers_per_stage: s.layers_per_stage,
            widths: s.widths,
            a: s.a,
            b: s.b,
            groups: s.groups,
            groupwise_layers: s.groupwise_layers,
            num_classes: s.num_classes,
            input_channels: s.input_channels,
            bn_eps: s.bn_eps,
        }
    }
}

/// One conv layer (one block) of a model, as laid out by its spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    /// 1-based over all conv layers.
    pub index: usize,
    /// 1-based.
    pub stage: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub groups: usize,
    pub has_identity: bool,
}

fn default_groupwise(variant: Variant) -> Vec<usize> {
    match variant {
        Variant::A => (3..=21).step_by(2).collect(),
        Variant::B => (3..=27).step_by(2).collect(),
        Variant::Custom => Vec::new(),
    }
}

fn stage_of(layers_per_stage: &[usize], index: usize) -> usize {
    let mut end = 0;
    for (s, &n) in layers_per_stage.iter().enumerate() {
        end += n;
        if index <= end {
            return s + 1;
        }
    }
    layers_per_stage.len()
}

/// Builds the spec for variant A or B with width multipliers `a`, `b` and group count `g`.
///
/// Widths that come out as exact integers are used as is and must be divisible by `g` in every
/// stage that holds a groupwise layer. Fractional widths are rounded to the nearest integer and
/// then up to the next multiple of `g`.
pub fn build_spec(variant: Variant, a: f64, b: f64, g: usize, num_classes: usize) -> Result<ModelSpec> {
    let layers = match variant {
        Variant::A => A_LAYERS.to_vec(),
        Variant::B => B_LAYERS.to_vec(),
        Variant::Custom => {
            return Err(Error::Spec(
                "custom layouts are built with ModelSpec::custom".into(),
            ))
        }
    };
    if !(a > 0.0 && a.is_finite()) || !(b > 0.0 && b.is_finite()) {
        return Err(Error::Spec(format!("width multipliers must be positive, got a={a} b={b}")));
    }
    if ![1, 2, 4].contains(&g) {
        return Err(Error::Spec(format!("groups must be 1, 2 or 4, got {g}")));
    }
    let groupwise = if g > 1 { default_groupwise(variant) } else { Vec::new() };
    let mut widths = Vec::with_capacity(5);
    for (s, base) in BASE_WIDTHS.iter().enumerate() {
        let mult = if s == 4 { b } else { a };
        let raw = if s == 0 { (base * mult).min(64.0) } else { base * mult };
        let stage_g = if groupwise.iter().any(|&i| stage_of(&layers, i) == s + 1) { g } else { 1 };
        let width = if raw.fract() == 0.0 {
            let w = raw as usize;
            if !w.is_multiple_of(stage_g) {
                return Err(Error::Spec(format!(
                    "stage {} width {w} is not divisible by {stage_g} groups",
                    s + 1
                )));
            }
            w
        } else {
            let w = (raw.round() as usize).max(1);
            w.div_ceil(stage_g) * stage_g
        };
        widths.push(width);
    }
    let variant_name = match variant {
        Variant::A => "A",
        _ => "B",
    };
    let spec = ModelSpec {
        name: format!("RepVGG-{variant_name}(a={a},b={b},g={g})"),
        variant,
        layers_per_stage: layers,
        widths,
        a: Some(a),
        b: Some(b),
        groups: g,
        groupwise_layers: groupwise,
        num_classes,
        input_channels: 3,
        bn_eps: DEFAULT_BN_EPS,
    };
    spec.validate()?;
    Ok(spec)
}

impl ModelSpec {
    /// Free-form layout: any number of stages, explicit widths and groupwise layer indices.
    pub fn custom(
        name: impl Into<String>,
        layers_per_stage: Vec<usize>,
        widths: Vec<usize>,
        groups: usize,
        groupwise_layers: Vec<usize>,
        num_classes: usize,
        input_channels: usize,
    ) -> Result<Self> {
        let spec = ModelSpec {
            name: name.into(),
            variant: Variant::Custom,
            layers_per_stage,
            widths,
            a: None,
            b: None,
            groups,
            groupwise_layers: if groups > 1 { groupwise_layers } else { Vec::new() },
            num_classes,
            input_channels,
            bn_eps: DEFAULT_BN_EPS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_bn_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Spec(format!("bn eps must be positive, got {eps}")));
        }
        self.bn_eps = eps;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let stages = self.layers_per_stage.len();
        if stages == 0 || self.widths.len() != stages {
            return Err(Error::Spec(format!(
                "{} stage layer counts for {} widths",
                stages,
                self.widths.len()
            )));
        }
        match self.variant {
            Variant::A if self.layers_per_stage != A_LAYERS => {
                return Err(Error::Spec("variant A has stages [1, 2, 4, 14, 1]".into()))
            }
            Variant::B if self.layers_per_stage != B_LAYERS => {
                return Err(Error::Spec("variant B has stages [1, 4, 6, 16, 1]".into()))
            }
            _ => {}
        }
        if let Some(s) = self.layers_per_stage.iter().position(|&n| n == 0) {
            return Err(Error::Spec(format!("stage {} has no layers", s + 1)));
        }
        if let Some(s) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::Spec(format!("stage {} has zero width", s + 1)));
        }
        if self.groups == 0 {
            return Err(Error::Spec("groups must be positive".into()));
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::Spec("num_classes and input_channels must be positive".into()));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Spec("bn eps must be positive".into()));
        }
        let total = self.num_layers();
        let mut prev = 0;
        for &i in &self.groupwise_layers {
            if i == 0 || i > total {
                return Err(Error::Spec(format!("groupwise layer {i} out of 1..={total}")));
            }
            if i <= prev {
                return Err(Error::Spec("groupwise layers must be strictly increasing".into()));
            }
            if prev != 0 && i == prev + 1 {
                return Err(Error::Spec(format!(
                    "groupwise layers {prev} and {i} are adjacent"
                )));
            }
            prev = i;
        }
        for l in self.layer_plan_unchecked() {
            if l.c_in % l.groups != 0 || l.c_out % l.groups != 0 {
                return Err(Error::Spec(format!(
                    "stage {} layer {} ({} -> {} channels) not divisible by {} groups",
                    l.stage, l.index, l.c_in, l.c_out, l.groups
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn layers_per_stage(&self) -> &[usize] {
        &self.layers_per_stage
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn a(&self) -> Option<f64> {
        self.a
    }

    pub fn b(&self) -> Option<f64> {
        self.b
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn groupwise_layers(&self) -> &[usize] {
        &self.groupwise_layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn bn_eps(&self) -> f64 {
        self.bn_eps
    }

    pub fn num_stages(&self) -> usize {
        self.layers_per_stage.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers_per_stage.iter().sum()
    }

    /// Width of the final stage, i.e. the head's input features.
    pub fn feature_width(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }

    /// Smallest input side length that keeps every stride-2 layer meaningful.
    pub fn min_input_size(&self) -> usize {
        1 << self.num_stages()
    }

    pub fn layer_plan(&self) -> Vec<LayerPlan> {
        self.layer_plan_unchecked()
    }

    fn layer_plan_unchecked(&self) -> Vec<LayerPlan> {
        let mut plan = Vec::with_capacity(self.num_layers());
        let mut c_in = self.input_channels;
        let mut index = 0;
        for (s, (&n, &width)) in self.layers_per_stage.iter().zip(&self.widths).enumerate() {
            for j in 0..n {
                index += 1;
                let stride = if j == 0 { 2 } else { 1 };
                let groups = if self.groupwise_layers.contains(&index) {
                    self.groups
                } else {
                    1
                };
                plan.push(LayerPlan {
                    index,
                    stage: s + 1,
                    c_in,
                    c_out: width,
                    stride,
                    groups,
                    has_identity: stride == 1 && c_in == width,
                });
                c_in = width;
            }
        }
        plan
    }
}

/// Which convolution kernel a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    /// im2col + matrix product for every layer.
    #[default]
    Direct,
    /// F(2x2,3x3) Winograd for every stride-1 3x3 conv, direct for the rest.
    Winograd,
    /// Winograd for stride-1 3x3 convs with at least 8 input channels per group, direct otherwise.
    Auto,
}

impl FromStr for ConvAlgo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(ConvAlgo::Direct),
            "winograd" => Ok(ConvAlgo::Winograd),
            "auto" => Ok(ConvAlgo::Auto),
            _ => Err(Error::Unsupported(format!("unknown conv algorithm {s:?}"))),
        }
    }
}

impl ConvAlgo {
    fn use_winograd<T: Scalar>(self, p: &ConvParams<T>) -> bool {
        let eligible = p.kernel_size() == 3 && p.stride() == 1;
        match self {
            ConvAlgo::Direct => false,
            ConvAlgo::Winograd => eligible,
            ConvAlgo::Auto => eligible && p.in_channels() / p.groups() >= 8,
        }
    }
}

/// Layer body: a training-time block or its converted single conv.
#[derive(Clone, Debug)]
pub enum LayerKind<T> {
    Train(RepVggBlock<T>),
    Deploy(FusedConv<T>),
}

#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub index: usize,
    pub stage: usize,
    pub kind: LayerKind<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn num_params(&self) -> usize {
        match &self.kind {
            LayerKind::Train(b) => b.num_params(),
            LayerKind::Deploy(f) => f.num_params(),
        }
    }

    pub fn stride(&self) -> usize {
        match &self.kind {
            LayerKind::Train(b) => b.stride(),
            LayerKind::Deploy(f) => f.conv().stride(),
        }
    }

    pub fn groups(&self) -> usize {
        match &self.kind {
            LayerKind::Train(b) => b.groups(),
            LayerKind::Deploy(f) => f.conv().groups(),
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, algo: ConvAlgo) -> Result<Tensor4<T>> {
        match &self.kind {
            LayerKind::Train(block) => {
                if !algo.use_winograd(block.conv3()) {
                    return block_forward_train(block, x);
                }
                let mut sum = batch_norm_infer(&block.conv3_winograd()?.apply(x)?, block.bn3())?;
                sum.add_assign(&batch_norm_infer(&conv2d(x, block.conv1())?, block.bn1())?)?;
                if let Some(bn) = block.bn_id() {
                    sum.add_assign(&batch_norm_infer(x, bn)?)?;
                }
                relu_in_place(&mut sum);
                Ok(sum)
            }
            LayerKind::Deploy(fused) => {
                if algo.use_winograd(fused.conv()) {
                    return fused.winograd()?.apply_relu(x);
                }
                let mut y = conv2d(x, fused.conv())?;
                relu_in_place(&mut y);
                Ok(y)
            }
        }
    }
}

impl<T: Scalar> PartialEq for Layer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index
            && self.stage == other.stage
            && match (&self.kind, &other.kind) {
                (LayerKind::Train(a), LayerKind::Train(b)) => a == b,
                (LayerKind::Deploy(a), LayerKind::Deploy(b)) => a == b,
                _ => false,
            }
    }
}

impl<T: Scalar> FusedConv<T> {
    /// Winograd-domain kernels, computed on first use and cached.
    pub fn winograd(&self) -> Result<&WinogradKernel<T>> {
        if let Some(k) = self.wino_cache().get() {
            return Ok(k);
        }
        let k = WinogradKernel::new(self.conv())?;
        Ok(self.wino_cache().get_or_init(|| k))
    }
}

pub(crate) type WinoCache<T> = OnceLock<WinogradKernel<T>>;

/// An instantiated model in train or deploy mode.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    mode: Mode,
    layers: Vec<Layer<T>>,
    head: Linear<T>,
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.mode == other.mode && self.layers == other.layers && self.head == other.head
    }
}

impl<T: Scalar> Model<T> {
    /// Assembles a model, checking every layer against the spec's layer plan.
    pub fn from_parts(spec: ModelSpec, mode: Mode, layers: Vec<Layer<T>>, head: Linear<T>) -> Result<Self> {
        let plan = spec.layer_plan();
        if layers.len() != plan.len() {
            return Err(Error::Model(format!(
                "spec has {} layers, model has {}",
                plan.len(),
                layers.len()
            )));
        }
        for (layer, want) in layers.iter().zip(&plan) {
            let here = format!("layer {}", want.index);
            if layer.index != want.index || layer.stage != want.stage {
                return Err(Error::Model(format!("{here}: wrong index or stage")));
            }
            let (c_in, c_out, stride, groups) = match (&layer.kind, mode) {
                (LayerKind::Train(b), Mode::Train) => {
                    if b.has_identity() != want.has_identity {
                        return Err(Error::Model(format!("{here}: identity branch mismatch")));
                    }
                    (b.c_in(), b.c_out(), b.stride(), b.groups())
                }
                (LayerKind::Deploy(f), Mode::Deploy) => {
                    let c = f.conv();
                    (c.in_channels(), c.out_channels(), c.stride(), c.groups())
                }
                _ => return Err(Error::Model(format!("{here}: layer kind does not match {mode} mode"))),
            };
            if (c_in, c_out, stride, groups) != (want.c_in, want.c_out, want.stride, want.groups) {
                return Err(Error::Model(format!(
                    "{here}: expected {}->{} stride {} groups {}, got {c_in}->{c_out} stride {stride} groups {groups}",
                    want.c_in, want.c_out, want.stride, want.groups
                )));
            }
        }
        if head.in_features() != spec.feature_width() || head.out_features() != spec.num_classes() {
            return Err(Error::Model(format!(
                "head is {}->{}, spec needs {}->{}",
                head.in_features(),
                head.out_features(),
                spec.feature_width(),
                spec.num_classes()
            )));
        }
        Ok(Model {
            spec,
            mode,
            layers,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Layer<T>], &mut Linear<T>) {
        (&mut self.layers, &mut self.head)
    }

    pub fn head(&self) -> &Linear<T> {
        &self.head
    }

    /// Every stored scalar, including batch-norm running statistics.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum::<usize>()
            + self.head.weight().len()
            + self.head.bias().len()
    }

    /// Training-time blocks, in order. Empty for deploy-mode models.
    pub fn blocks(&self) -> impl Iterator<Item = &RepVggBlock<T>> {
        self.layers.iter().filter_map(|l| match &l.kind {
            LayerKind::Train(b) => Some(b),
            LayerKind::Deploy(_) => None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let cast_bn = |bn: &BnParams<T>| BnParams::<U> {
            mean: cast_vec(bn.mean()),
            var: cast_vec(bn.var()),
            gamma: cast_vec(bn.gamma()),
            beta: cast_vec(bn.beta()),
            eps: bn.eps(),
        };
        let cast_conv = |c: &ConvParams<T>| {
            ConvParams::new(
                c.kernel().cast(),
                c.bias().map(cast_vec),
                c.stride(),
                c.padding(),
                c.groups(),
            )
            .expect("cast preserves a valid conv")
        };
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                index: l.index,
                stage: l.stage,
                kind: match &l.kind {
                    LayerKind::Train(b) => LayerKind::Train(RepVggBlock {
                        conv3: cast_conv(b.conv3()),
                        bn3: cast_bn(b.bn3()),
                        conv1: cast_conv(b.conv1()),
                        bn1: cast_bn(b.bn1()),
                        bn_id: b.bn_id().map(cast_bn),
                        wino3: WinoCache::new(),
                    }),
                    LayerKind::Deploy(f) => LayerKind::Deploy(
                        FusedConv::new(cast_conv(f.conv())).expect("cast preserves a fused conv"),
                    ),
                },
            })
            .collect();
        let head = Linear::new(
            cast_vec(self.head.weight()),
            cast_vec(self.head.bias()),
            self.head.in_features(),
            self.head.out_features(),
        )
        .expect("cast preserves head shape");
        Model {
            spec: self.spec.clone(),
            mode: self.mode,
            layers,
            head,
        }
    }
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::of(x.as_f64())).collect()
}

/// Builds a deterministic train-mode model.
///
/// Conv kernels are uniform in `±sqrt(6 / fan_in)`; the head is uniform in `±1/sqrt(in)` with
/// zero bias; every batch norm starts at mean 0, variance 1, gamma 1, beta 0.
pub fn instantiate<T: Scalar>(spec: &ModelSpec, seed: u64) -> Model<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = spec.bn_eps();
    let kernel = |rng: &mut ChaCha8Rng, c_out: usize, cin_g: usize, k: usize| {
        let bound = (6.0 / (cin_g * k * k) as f64).sqrt();
        Tensor4::from_fn([c_out, cin_g, k, k], |_, _, _, _| T::of(rng.gen_range(-bound..bound)))
    };
    let layers = spec
        .layer_plan()
        .into_iter()
        .map(|l| {
            let cin_g = l.c_in / l.groups;
            let conv3 = ConvParams::new(kernel(&mut rng, l.c_out, cin_g, 3), None, l.stride, 1, l.groups)
                .expect("plan is valid");
            let conv1 = ConvParams::new(kernel(&mut rng, l.c_out, cin_g, 1), None, l.stride, 0, l.groups)
                .expect("plan is valid");
            let block = RepVggBlock::new(
                conv3,
                BnParams::identity(l.c_out, eps),
                conv1,
                BnParams::identity(l.c_out, eps),
                l.has_identity.then(|| BnParams::identity(l.c_out, eps)),
            )
            .expect("plan is valid");
            Layer {
                index: l.index,
                stage: l.stage,
                kind: LayerKind::Train(block),
            }
        })
        .collect();
    let (fin, classes) = (spec.feature_width(), spec.num_classes());
    let bound = 1.0 / (fin as f64).sqrt();
    let weight = (0..fin * classes).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    let head = Linear::new(weight, vec![T::zero(); classes], fin, classes).expect("head shape");
    Model::from_parts(spec.clone(), Mode::Train, layers, head).expect("instantiated model matches its spec")
}

/// Logits of shape `(n, num_classes, 1, 1)`.
pub fn forward<T: Scalar>(model: &Model<T>, input: &Tensor4<T>) -> Result<Tensor4<T>> {
    forward_with(model, input, ConvAlgo::Direct)
}

pub fn forward_with<T: Scalar>(model: &Model<T>, input: &Tensor4<T>, algo: ConvAlgo) -> Result<Tensor4<T>> {
    Ok(forward_traced(model, input, algo)?.0)
}

/// Forward pass that also reports the output shape of every stage.
pub fn forward_traced<T: Scalar>(
    model: &Model<T>,
    input: &Tensor4<T>,
    algo: ConvAlgo,
) -> Result<(Tensor4<T>, Vec<[usize; 4]>)> {
    let spec = model.spec();
    let [_, c, h, w] = input.shape();
    if c != spec.input_channels() {
        return Err(Error::shape(format!(
            "model expects {} input channels, got {c}",
            spec.input_channels()
        )));
    }
    let min = spec.min_input_size();
    if h < min || w < min {
        return Err(Error::shape(format!(
            "input {h}x{w} is too small: {} stride-2 stages need at least {min}x{min}",
            spec.num_stages()
        )));
    }
    let mut stages = Vec::with_capacity(spec.num_stages());
    let mut x = input.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        x = layer.forward(&x, algo)?;
        let last_in_stage = model.layers.get(i + 1).is_none_or(|next| next.stage != layer.stage);
        if last_in_stage {
            stages.push(x.shape());
        }
    }
    let logits = fully_connected(&global_avg_pool(&x)?, &model.head)?;
    Ok((logits, stages))
}
