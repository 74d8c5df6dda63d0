//! The hybrid convolution/capsule architecture and its matched CNN baseline.
//!
//! A network is an ordered list of [`LayerSpec`]s. Shapes are inferred layer by
//! layer ([`NetworkSpec::layout`]), which also fixes the name and extent of every
//! parameter tensor. The forward pass is always recorded on a [`Tape`], so the
//! inference path and the training path run identical arithmetic.

mod layers;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::io::Archive;
use crate::routing::{RoutingConfig, RoutingMethod, POSE_DIM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use layers::{
    capsule_layer_forward, conv2d_forward, global_caps_route, max_pool2, primary_caps,
    residual_block_forward,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// 2×2 window, stride 2.
    Max2,
    GlobalAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride-1, same-padded convolution over a feature map.
    Conv { kernel: usize, channels: usize, relu: bool },
    /// Splits features into `16·capsules` pose channels and `capsules` activation
    /// channels, the latter passed through a 1×1 convolution and a logistic.
    PrimaryCaps { capsules: usize },
    /// Routing over non-overlapping `window × window` fields.
    CapsRoute { capsules: usize, window: usize, stride: usize },
    /// `pose' = relu(pose + conv(pose))` over the flattened pose channels.
    Residual { kernel: usize },
    /// Routes every capsule of the grid to the class capsules in one window.
    GlobalCapsRoute { capsules: usize },
    Pool { pool: PoolKind },
    /// Fully connected layer over the flattened input.
    Dense { units: usize, relu: bool },
}

/// Shape of the activations flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Features { h: usize, w: usize, c: usize },
    Capsules { h: usize, w: usize, c: usize },
    Vector { n: usize },
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Stage::Features { h, w, c } => write!(f, "features {h}x{w}x{c}"),
            Stage::Capsules { h, w, c } => write!(f, "capsules {h}x{w}x{c}"),
            Stage::Vector { n } => write!(f, "vector {n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Square input resolution.
    pub input_size: usize,
    pub input_channels: usize,
    pub classes: usize,
    pub method: RoutingMethod,
    pub routing: RoutingConfig,
    pub layers: Vec<LayerSpec>,
}

/// Name and extents of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Transform,
    /// Activation coefficients; initialized to the identity `β_d = 1, β_0 = 0`.
    Beta,
}

/// Result of shape inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// Stage after each layer.
    pub stages: Vec<Stage>,
    /// Parameters in the order the forward pass consumes them.
    pub params: Vec<ParamSlot>,
}

impl Layout {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.dims.iter().product::<usize>()).sum()
    }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec::reduced(10, 32, 8, 3)
    }
}

impl NetworkSpec {
    /// The four-capsule-layer network for 32×32 inputs: a 5×5 stem of `stem`
    /// channels, a 3×3 convolution into `17·c` channels, primary capsules, then
    /// capsule layers to `2c`, `4c` and `8c` capsules (the last two followed by a
    /// residual block) and a global routing to `classes` capsules.
    pub fn reduced(classes: usize, stem: usize, c: usize, residual_kernel: usize) -> Self {
        let route = |capsules| LayerSpec::CapsRoute {
            capsules,
            window: 2,
            stride: 2,
        };
        NetworkSpec {
            input_size: 32,
            input_channels: 1,
            classes,
            method: RoutingMethod::Frem,
            routing: RoutingConfig::default(),
            layers: vec![
                LayerSpec::Conv {
                    kernel: 5,
                    channels: stem,
                    relu: true,
                },
                LayerSpec::Conv {
                    kernel: 3,
                    channels: 17 * c,
                    relu: false,
                },
                LayerSpec::PrimaryCaps { capsules: c },
                route(2 * c),
                route(4 * c),
                LayerSpec::Residual {
                    kernel: residual_kernel,
                },
                route(8 * c),
                LayerSpec::Residual {
                    kernel: residual_kernel,
                },
                LayerSpec::GlobalCapsRoute { capsules: classes },
            ],
        }
    }

    /// The five-capsule-layer network for 64×64 inputs.
    pub fn full(classes: usize, stem: usize, c: usize, residual_kernel: usize) -> Self {
        let mut spec = NetworkSpec::reduced(classes, stem, c, residual_kernel);
        spec.input_size = 64;
        let widths = [2 * c, 4 * c, 8 * c, 16 * c];
        spec.layers.truncate(3);
        for (k, &capsules) in widths.iter().enumerate() {
            spec.layers.push(LayerSpec::CapsRoute {
                capsules,
                window: 2,
                stride: 2,
            });
            if k > 0 {
                spec.layers.push(LayerSpec::Residual {
                    kernel: residual_kernel,
                });
            }
        }
        spec.layers.push(LayerSpec::GlobalCapsRoute { capsules: classes });
        spec
    }

    pub fn has_capsules(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::PrimaryCaps { .. }))
    }

    /// Infers every stage and parameter shape, checking that consecutive layers fit.
    pub fn layout(&self) -> Result<Layout> {
        if self.input_size == 0 || self.input_channels == 0 || self.classes == 0 {
            return Err(Error::InvalidConfig("input size, channels and classes must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("network has no layers".into()));
        }
        let bad = |i: usize, l: &LayerSpec, s: Stage| {
            Err(Error::InvalidConfig(format!("layer {i} ({l:?}) cannot follow {s}")))
        };
        let mut stage = Stage::Features {
            h: self.input_size,
            w: self.input_size,
            c: self.input_channels,
        };
        let mut stages = Vec::with_capacity(self.layers.len());
        let mut params = Vec::new();
        let mut slot = |name: String, dims: Vec<usize>, kind| params.push(ParamSlot { name, dims, kind });
        let globals = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::GlobalCapsRoute { .. }))
            .count();
        if self.has_capsules() {
            if globals != 1 || !matches!(self.layers.last(), Some(LayerSpec::GlobalCapsRoute { .. })) {
                return Err(Error::InvalidConfig(
                    "a capsule network needs exactly one global routing layer, placed last".into(),
                ));
            }
            if !self.method.trainable() {
                return Err(Error::InvalidConfig(format!(
                    "{} routing cannot be used inside a network",
                    self.method
                )));
            }
            self.routing.validate(self.method)?;
        }
        for (i, layer) in self.layers.iter().enumerate() {
            stage = match (*layer, stage) {
                (LayerSpec::Conv { kernel, channels, .. }, Stage::Features { h, w, c }) => {
                    if kernel % 2 == 0 || channels == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: convolution needs an odd kernel and >= 1 channel"
                        )));
                    }
                    slot(format!("{i}.conv.weight"), vec![kernel, kernel, c, channels], ParamKind::Weight);
                    slot(format!("{i}.conv.bias"), vec![channels], ParamKind::Bias);
                    Stage::Features { h, w, c: channels }
                }
                (LayerSpec::PrimaryCaps { capsules }, Stage::Features { h, w, c }) => {
                    if capsules == 0 || c != (POSE_DIM + 1) * capsules {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: {capsules} primary capsules need {} channels, found {c}",
                            (POSE_DIM + 1) * capsules
                        )));
                    }
                    slot(format!("{i}.primary.weight"), vec![1, 1, capsules, capsules], ParamKind::Weight);
                    slot(format!("{i}.primary.bias"), vec![capsules], ParamKind::Bias);
                    Stage::Capsules { h, w, c: capsules }
                }
                (LayerSpec::CapsRoute { capsules, window, stride }, Stage::Capsules { h, w, c }) => {
                    if window != stride || window == 0 || capsules == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: routing windows must not overlap (window {window}, stride {stride})"
                        )));
                    }
                    if h % window != 0 || w % window != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: grid {h}x{w} is not divisible by window {window}"
                        )));
                    }
                    let n = window * window * c;
                    slot(format!("{i}.caps.transforms"), vec![n, capsules, 4, 4], ParamKind::Transform);
                    slot(format!("{i}.caps.beta"), vec![capsules, POSE_DIM + 1], ParamKind::Beta);
                    Stage::Capsules {
                        h: h / window,
                        w: w / window,
                        c: capsules,
                    }
                }
                (LayerSpec::Residual { kernel }, Stage::Capsules { h, w, c }) => {
                    if kernel % 2 == 0 {
                        return Err(Error::InvalidConfig(format!("layer {i}: residual kernel must be odd")));
                    }
                    let ch = c * POSE_DIM;
                    slot(format!("{i}.residual.weight"), vec![kernel, kernel, ch, ch], ParamKind::Weight);
                    slot(format!("{i}.residual.bias"), vec![ch], ParamKind::Bias);
                    Stage::Capsules { h, w, c }
                }
                (LayerSpec::GlobalCapsRoute { capsules }, Stage::Capsules { h, w, c }) => {
                    if capsules != self.classes {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: {capsules} class capsules for {} classes",
                            self.classes
                        )));
                    }
                    slot(format!("{i}.global.transforms"), vec![h * w * c, capsules, 4, 4], ParamKind::Transform);
                    slot(format!("{i}.global.beta"), vec![capsules, POSE_DIM + 1], ParamKind::Beta);
                    Stage::Vector { n: capsules }
                }
                (LayerSpec::Pool { pool: PoolKind::Max2 }, Stage::Features { h, w, c }) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::InvalidConfig(format!("layer {i}: cannot pool odd map {h}x{w}")));
                    }
                    Stage::Features { h: h / 2, w: w / 2, c }
                }
                (
                    LayerSpec::Pool {
                        pool: PoolKind::GlobalAverage,
                    },
                    Stage::Features { c, .. },
                ) => Stage::Vector { n: c },
                (LayerSpec::Dense { units, .. }, s) => {
                    let n = match s {
                        Stage::Features { h, w, c } => h * w * c,
                        Stage::Vector { n } => n,
                        Stage::Capsules { .. } => return bad(i, layer, s),
                    };
                    slot(format!("{i}.dense.weight"), vec![n, units], ParamKind::Weight);
                    slot(format!("{i}.dense.bias"), vec![units], ParamKind::Bias);
                    Stage::Vector { n: units }
                }
                (_, s) => return bad(i, layer, s),
            };
            stages.push(stage);
        }
        if stage != (Stage::Vector { n: self.classes }) {
            return Err(Error::InvalidConfig(format!(
                "network ends in {stage}, expected a vector of {} classes",
                self.classes
            )));
        }
        Ok(Layout { stages, params })
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.layout()?.parameter_count())
    }
}

/// How convolution and dense weights are scaled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Standard deviation `weight_stddev` everywhere.
    Fixed,
    /// Standard deviation `sqrt(2 / fan_in)`.
    FanIn,
}

/// Weight initialization scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Standard deviation of transform matrices.
    pub transform_stddev: f64,
    /// Standard deviation of convolution and dense weights under [`WeightInit::Fixed`].
    pub weight_stddev: f64,
    pub weights: WeightInit,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            transform_stddev: 0.1,
            weight_stddev: 0.01,
            weights: WeightInit::Fixed,
        }
    }
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Parameters<T> {
    /// Draws weights from a normal distribution truncated at ±2σ. Biases start at
    /// zero and activation coefficients at the identity.
    pub fn init(spec: &NetworkSpec, init: &InitConfig, rng: &mut impl Rng) -> Result<Self> {
        let layout = spec.layout()?;
        let mut entries = Vec::with_capacity(layout.params.len());
        for slot in layout.params {
            let len: usize = slot.dims.iter().product();
            let t = match slot.kind {
                ParamKind::Bias => Tensor::zeros(slot.dims)?,
                ParamKind::Beta => {
                    let cols = *slot.dims.last().expect("beta is 2-d");
                    Tensor::from_fn(slot.dims, |k| if k % cols == 0 { T::zero() } else { T::one() })?
                }
                ParamKind::Weight | ParamKind::Transform => {
                    let fan_in = len / slot.dims.last().expect("weights have an output axis");
                    let sd = match (slot.kind, init.weights) {
                        (ParamKind::Transform, _) => init.transform_stddev,
                        (_, WeightInit::Fixed) => init.weight_stddev,
                        (_, WeightInit::FanIn) => (2.0 / fan_in as f64).sqrt(),
                    };
                    let data = truncated_normal(rng, sd, len)?.into_iter().map(T::c).collect();
                    Tensor::new(slot.dims, data)?
                }
            };
            entries.push((slot.name, t));
        }
        Ok(Parameters { entries })
    }

    /// Wraps tensors, checking names and extents against `spec`.
    pub fn from_entries(spec: &NetworkSpec, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let layout = spec.layout()?;
        if layout.params.len() != entries.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.params.len(),
                entries.len()
            )));
        }
        for (slot, (name, t)) in layout.params.iter().zip(&entries) {
            if slot.name != *name || slot.dims != t.dims() {
                return Err(Error::Format(format!(
                    "parameter {name:?} {:?} does not match {:?} {:?}",
                    t.dims(),
                    slot.name,
                    slot.dims
                )));
            }
        }
        Ok(Parameters { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn to_archive(&self) -> Archive<T> {
        let mut a = Archive::new();
        for (n, t) in &self.entries {
            a.push(n.clone(), t.clone());
        }
        a
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(spec: &NetworkSpec, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(spec, Archive::read(path)?.into_entries())
    }

    /// Records every tensor as a trainable leaf.
    pub fn to_tape(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    /// Records every tensor as a constant.
    pub fn to_tape_constant(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }
}

fn truncated_normal(rng: &mut impl Rng, sd: f64, len: usize) -> Result<Vec<f64>> {
    if !(sd > 0.0) {
        return Err(Error::InvalidConfig(format!("init stddev must be > 0, got {sd}")));
    }
    let normal = Normal::new(0.0, sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok((0..len)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * sd {
                break x;
            }
        })
        .collect())
}

/// Records the forward pass of `spec` for one `[h, w, c]` image; returns the class
/// probabilities `[classes]`.
pub fn forward_on_tape<T: Scalar>(tape: &mut Tape<T>, spec: &NetworkSpec, params: &[Var], image: Var) -> Result<Var> {
    let layout = spec.layout()?;
    if params.len() != layout.params.len() {
        return shape_err(
            "network_forward",
            format!("{} parameter vars for {} slots", params.len(), layout.params.len()),
        );
    }
    let expect = [spec.input_size, spec.input_size, spec.input_channels];
    if tape.dims(image) != expect {
        return shape_err(
            "network_forward",
            format!("image {:?}, expected {expect:?}", tape.dims(image)),
        );
    }
    let mut next = params.iter().copied();
    let mut take = || next.next().expect("layout counted");
    let mut x = layers::Flow::Features(image);
    for layer in &spec.layers {
        x = match (*layer, x) {
            (LayerSpec::Conv { relu, .. }, layers::Flow::Features(f)) => {
                let (w, b) = (take(), take());
                let y = tape.conv2d(f, w, b)?;
                layers::Flow::Features(if relu { tape.relu(y) } else { y })
            }
            (LayerSpec::PrimaryCaps { capsules }, layers::Flow::Features(f)) => {
                let (w, b) = (take(), take());
                layers::Flow::Capsules(layers::primary_on_tape(tape, f, w, b, capsules)?)
            }
            (LayerSpec::CapsRoute { window, .. }, layers::Flow::Capsules(g)) => {
                let (t, beta) = (take(), take());
                layers::Flow::Capsules(layers::route_on_tape(tape, g, t, beta, window, spec.method, &spec.routing)?)
            }
            (LayerSpec::Residual { .. }, layers::Flow::Capsules(g)) => {
                let (w, b) = (take(), take());
                layers::Flow::Capsules(layers::residual_on_tape(tape, g, w, b)?)
            }
            (LayerSpec::GlobalCapsRoute { .. }, layers::Flow::Capsules(g)) => {
                let (t, beta) = (take(), take());
                let (_, act) = layers::global_on_tape(tape, g, t, beta, spec.method, &spec.routing)?;
                layers::Flow::Vector(act)
            }
            (LayerSpec::Pool { pool: PoolKind::Max2 }, layers::Flow::Features(f)) => {
                layers::Flow::Features(tape.max_pool2(f)?)
            }
            (
                LayerSpec::Pool {
                    pool: PoolKind::GlobalAverage,
                },
                layers::Flow::Features(f),
            ) => layers::Flow::Vector(tape.global_avg_pool(f)?),
            (LayerSpec::Dense { units, relu }, flow) => {
                let (w, b) = (take(), take());
                let v = match flow {
                    layers::Flow::Features(f) | layers::Flow::Vector(f) => f,
                    layers::Flow::Capsules(_) => unreachable!("rejected by layout"),
                };
                let n = tape.value(v).len();
                let row = tape.reshape(v, vec![1, n])?;
                let y = tape.matmul(row, w)?;
                let y = tape.reshape(y, vec![units])?;
                let y = tape.add(y, b)?;
                layers::Flow::Vector(if relu { tape.relu(y) } else { y })
            }
            _ => unreachable!("rejected by layout"),
        };
    }
    let layers::Flow::Vector(out) = x else {
        unreachable!("layout ends in a vector")
    };
    // Capsule networks end in routing activations, which are already a softmax.
    Ok(if spec.has_capsules() {
        out
    } else {
        tape.softmax_last(out)
    })
}

/// Class probabilities for one `[h, w, c]` image.
pub fn network_forward<T: Scalar>(spec: &NetworkSpec, params: &Parameters<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.to_tape_constant(&mut tape);
    let x = tape.constant(image.clone());
    let out = forward_on_tape(&mut tape, spec, &vars, x)?;
    Ok(tape.value(out).clone())
}

/// The matched convolutional baseline: the same stem, max pooling in place of each
/// capsule layer, a plain relu convolution in place of each residual block, and a
/// 3×3 convolution to `classes` channels followed by global average pooling.
///
/// Hidden widths of the replacement convolutions are scaled together so that the
/// parameter count is as close as possible to the capsule network's.
pub fn build_baseline_cnn(spec: &NetworkSpec) -> Result<NetworkSpec> {
    let target = spec.parameter_count()?;
    let layout = spec.layout()?;
    let build = |scale: f64| -> NetworkSpec {
        let mut layers = Vec::new();
        for (layer, stage) in spec.layers.iter().zip(&layout.stages) {
            match *layer {
                LayerSpec::Conv { kernel, channels, .. } => layers.push(LayerSpec::Conv {
                    kernel,
                    channels,
                    relu: true,
                }),
                LayerSpec::PrimaryCaps { .. } => {}
                LayerSpec::CapsRoute { .. } => layers.push(LayerSpec::Pool { pool: PoolKind::Max2 }),
                LayerSpec::Residual { kernel } => {
                    let Stage::Capsules { c, .. } = *stage else {
                        unreachable!("residual blocks act on capsules")
                    };
                    let channels = ((c * POSE_DIM) as f64 * scale).round().max(1.0) as usize;
                    layers.push(LayerSpec::Conv {
                        kernel,
                        channels,
                        relu: true,
                    });
                }
                LayerSpec::GlobalCapsRoute { capsules } => {
                    layers.push(LayerSpec::Conv {
                        kernel: 3,
                        channels: capsules,
                        relu: false,
                    });
                    layers.push(LayerSpec::Pool {
                        pool: PoolKind::GlobalAverage,
                    });
                }
                other => layers.push(other),
            }
        }
        NetworkSpec {
            layers,
            ..spec.clone()
        }
    };
    if !spec.has_capsules() {
        return Err(Error::InvalidConfig("baseline CNN is built from a capsule network".into()));
    }
    let mut best: Option<(usize, NetworkSpec)> = None;
    for step in 1..=256 {
        let cnn = build(step as f64 / 64.0);
        let gap = cnn.parameter_count()?.abs_diff(target);
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, cnn));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Spread,
    Margin,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Spread => "spread",
            LossKind::Margin => "margin",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spread" => Ok(LossKind::Spread),
            "margin" => Ok(LossKind::Margin),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}
