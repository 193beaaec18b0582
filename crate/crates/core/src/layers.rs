//! Layer specifications and their built, parameterized counterparts.
//!
//! Blocks are plain sequences of layers. Convolutions are followed by a
//! ReLU; residual units compute `skip(x) + conv2(relu(conv1(x)))` where the
//! skip path is the identity, or a strided 1×1 projection when the channel
//! count or stride changes. There is no normalization layer.

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Residual,
    MaxPool,
    GlobalAvgPool,
    Linear,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Residual => "res",
            LayerKind::MaxPool => "maxpool",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::Linear => "linear",
        }
    }
}

/// Declarative description of one layer. For pooling layers `kernel` is
/// the window and the channel counts pass through unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Number of stacked residual units; 1 for every other kind.
    pub repeat: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel,
            stride,
            repeat: 1,
        }
    }

    pub fn residual(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, repeat: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Residual,
            in_channels,
            out_channels,
            kernel,
            stride,
            repeat,
        }
    }

    pub fn max_pool(channels: usize, window: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool,
            in_channels: channels,
            out_channels: channels,
            kernel: window,
            stride,
            repeat: 1,
        }
    }

    pub fn global_avg_pool(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::GlobalAvgPool,
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
            stride: 1,
            repeat: 1,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear,
            in_channels: in_features,
            out_channels: out_features,
            kernel: 1,
            stride: 1,
            repeat: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(format!("{} layer: {msg}", self.kind.as_str())));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be at least 1");
        }
        if !(1..=2).contains(&self.stride) {
            return bad("stride must be 1 or 2");
        }
        if self.repeat == 0 {
            return bad("repeat must be at least 1");
        }
        if self.kernel == 0 {
            return bad("kernel must be at least 1");
        }
        match self.kind {
            LayerKind::Conv | LayerKind::Residual if self.kernel.is_multiple_of(2) => bad("kernel must be odd"),
            LayerKind::MaxPool | LayerKind::GlobalAvgPool if self.in_channels != self.out_channels => {
                bad("pooling cannot change the channel count")
            }
            _ if self.kind != LayerKind::Residual && self.repeat != 1 => bad("only residual layers repeat"),
            _ => Ok(()),
        }
    }

    /// Spatial extents after this layer, or `None` if they degenerate.
    pub fn out_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |x: usize| -> Option<usize> {
            match self.kind {
                // odd kernels with padding k/2 keep `(x - 1) / s + 1`
                LayerKind::Conv | LayerKind::Residual => (x >= 1).then(|| (x - 1) / self.stride + 1),
                LayerKind::MaxPool => (x >= self.kernel).then(|| (x - self.kernel) / self.stride + 1),
                LayerKind::GlobalAvgPool => (x >= 1).then_some(1),
                LayerKind::Linear => Some(x),
            }
        };
        Some((f(h)?, f(w)?))
    }

    /// Trainable parameter count once built.
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        match self.kind {
            LayerKind::Conv => conv(self.in_channels, self.out_channels, self.kernel),
            LayerKind::Residual => (0..self.repeat)
                .map(|u| {
                    let cin = if u == 0 { self.in_channels } else { self.out_channels };
                    let stride = if u == 0 { self.stride } else { 1 };
                    let proj = if cin != self.out_channels || stride != 1 {
                        conv(cin, self.out_channels, 1)
                    } else {
                        0
                    };
                    conv(cin, self.out_channels, self.kernel) + conv(self.out_channels, self.out_channels, self.kernel) + proj
                })
                .sum(),
            LayerKind::MaxPool | LayerKind::GlobalAvgPool => 0,
            LayerKind::Linear => self.in_channels * self.out_channels + self.out_channels,
        }
    }
}

/// Ordered layers forming one of the four blocks of an architecture.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    /// 1-based position; block 1 is the shared base.
    pub index: usize,
    pub layers: Vec<LayerSpec>,
}

impl BlockSpec {
    pub fn new(index: usize, layers: Vec<LayerSpec>) -> Self {
        BlockSpec { index, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.index) {
            return Err(Error::InvalidSpec(format!("block index {} not in 1..=4", self.index)));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec(format!("block {} has no layers", self.index)));
        }
        for (j, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.kind == LayerKind::Linear {
                return Err(Error::InvalidSpec(format!(
                    "block {}: linear layers belong to the classifier",
                    self.index
                )));
            }
            if j > 0 && layer.in_channels != self.layers[j - 1].out_channels {
                return Err(Error::InvalidSpec(format!(
                    "block {} layer {j}: expects {} input channels, predecessor emits {}",
                    self.index,
                    layer.in_channels,
                    self.layers[j - 1].out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn out_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.layers.iter().try_fold((h, w), |(h, w), l| l.out_extent(h, w))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Element> Param<T> {
    fn deep_copy(&self) -> Self {
        Param {
            name: self.name.clone(),
            tensor: self.tensor.deep_copy(),
        }
    }
}

fn he_uniform<T: Element, R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect()
}

fn param<T: Element>(name: String, data: Vec<T>, shape: &[usize]) -> Result<Param<T>> {
    Ok(Param {
        name,
        tensor: Tensor::parameter(data, shape)?,
    })
}

/// Convolution with bias and "same"-style padding `kernel / 2`. No
/// activation.
#[derive(Debug)]
pub struct Conv2d<T: Element> {
    pub kernel: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        Ok(Conv2d {
            kernel: param(format!("{prefix}.kernel"), he_uniform(rng, cout * fan_in, fan_in), &[cout, cin, k, k])?,
            bias: param(format!("{prefix}.bias"), vec![T::zero(); cout], &[cout])?,
            stride,
            padding: k / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.tensor.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.tensor.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.kernel.tensor, &self.bias.tensor, self.stride, self.padding)
    }

    fn collect(&self, out: &mut Vec<Param<T>>) {
        out.push(self.kernel.clone());
        out.push(self.bias.clone());
    }

    fn deep_copy(&self) -> Self {
        Conv2d {
            kernel: self.kernel.deep_copy(),
            bias: self.bias.deep_copy(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Debug)]
pub struct ResidualUnit<T: Element> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub projection: Option<Conv2d<T>>,
}

impl<T: Element> ResidualUnit<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let residual = self.conv2.forward(&self.conv1.forward(x)?.relu())?;
        match &self.projection {
            Some(p) => p.forward(x)?.add(&residual),
            None => x.add(&residual),
        }
    }

    fn collect(&self, out: &mut Vec<Param<T>>) {
        self.conv1.collect(out);
        self.conv2.collect(out);
        if let Some(p) = &self.projection {
            p.collect(out);
        }
    }

    fn deep_copy(&self) -> Self {
        ResidualUnit {
            conv1: self.conv1.deep_copy(),
            conv2: self.conv2.deep_copy(),
            projection: self.projection.as_ref().map(Conv2d::deep_copy),
        }
    }
}

/// Fully-connected layer over `[N, in]` inputs; weight is stored `[in, out]`.
#[derive(Debug)]
pub struct Linear<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Linear<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            weight: param(format!("{prefix}.weight"), he_uniform(rng, fan_in * fan_out, fan_in), &[fan_in, fan_out])?,
            bias: param(format!("{prefix}.bias"), vec![T::zero(); fan_out], &[fan_out])?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight.tensor)?.add(&self.bias.tensor)
    }

    pub(crate) fn collect(&self, out: &mut Vec<Param<T>>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }

    pub(crate) fn deep_copy(&self) -> Self {
        Linear {
            weight: self.weight.deep_copy(),
            bias: self.bias.deep_copy(),
        }
    }
}

#[derive(Debug)]
pub enum Layer<T: Element> {
    Conv(Conv2d<T>),
    Residual(Vec<ResidualUnit<T>>),
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Linear(Linear<T>),
}

impl<T: Element> Layer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => Ok(c.forward(x)?.relu()),
            Layer::Residual(units) => {
                let mut h = x.clone();
                for u in units {
                    h = u.forward(&h)?;
                }
                Ok(h)
            }
            Layer::MaxPool { window, stride } => x.max_pool2d(*window, *stride),
            Layer::GlobalAvgPool => x.global_avg_pool(),
            Layer::Linear(l) => {
                let n = x.shape()[0];
                l.forward(&x.reshape(&[n, x.numel() / n.max(1)])?)
            }
        }
    }

    pub fn parameters(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect(&self, out: &mut Vec<Param<T>>) {
        match self {
            Layer::Conv(c) => c.collect(out),
            Layer::Residual(units) => units.iter().for_each(|u| u.collect(out)),
            Layer::Linear(l) => l.collect(out),
            Layer::MaxPool { .. } | Layer::GlobalAvgPool => {}
        }
    }

    fn deep_copy(&self) -> Self {
        match self {
            Layer::Conv(c) => Layer::Conv(c.deep_copy()),
            Layer::Residual(units) => Layer::Residual(units.iter().map(ResidualUnit::deep_copy).collect()),
            Layer::MaxPool { window, stride } => Layer::MaxPool {
                window: *window,
                stride: *stride,
            },
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Linear(l) => Layer::Linear(l.deep_copy()),
        }
    }
}

/// Builds the parameterized layer for `spec`, registering its parameters
/// under `prefix`. Weights are He-uniform in `±sqrt(6 / fan_in)`, biases
/// start at zero.
pub fn build_layer<T: Element, R: Rng + ?Sized>(spec: &LayerSpec, prefix: &str, rng: &mut R) -> Result<Layer<T>> {
    spec.validate()?;
    Ok(match spec.kind {
        LayerKind::Conv => Layer::Conv(Conv2d::new(
            prefix,
            spec.in_channels,
            spec.out_channels,
            spec.kernel,
            spec.stride,
            rng,
        )?),
        LayerKind::Residual => {
            let mut units = Vec::with_capacity(spec.repeat);
            for u in 0..spec.repeat {
                let cin = if u == 0 { spec.in_channels } else { spec.out_channels };
                let stride = if u == 0 { spec.stride } else { 1 };
                let p = format!("{prefix}.u{u}");
                let conv1 = Conv2d::new(&format!("{p}.conv1"), cin, spec.out_channels, spec.kernel, stride, rng)?;
                let conv2 = Conv2d::new(&format!("{p}.conv2"), spec.out_channels, spec.out_channels, spec.kernel, 1, rng)?;
                let projection = if cin != spec.out_channels || stride != 1 {
                    Some(Conv2d::new(&format!("{p}.proj"), cin, spec.out_channels, 1, stride, rng)?)
                } else {
                    None
                };
                units.push(ResidualUnit {
                    conv1,
                    conv2,
                    projection,
                });
            }
            Layer::Residual(units)
        }
        LayerKind::MaxPool => Layer::MaxPool {
            window: spec.kernel,
            stride: spec.stride,
        },
        LayerKind::GlobalAvgPool => Layer::GlobalAvgPool,
        LayerKind::Linear => Layer::Linear(Linear::new(prefix, spec.in_channels, spec.out_channels, rng)?),
    })
}

/// A built block. Counts its forward invocations so callers can verify
/// how often a shared block actually runs.
#[derive(Debug)]
pub struct Block<T: Element> {
    pub spec: BlockSpec,
    pub layers: Vec<Layer<T>>,
    calls: Cell<usize>,
}

impl<T: Element> Block<T> {
    pub fn build<R: Rng + ?Sized>(spec: &BlockSpec, prefix: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| build_layer(l, &format!("{prefix}.l{j}"), rng))
            .collect::<Result<_>>()?;
        Ok(Block {
            spec: spec.clone(),
            layers,
            calls: Cell::new(0),
        })
    }

    /// Runs the block on `[N, C, H, W]` input and returns its output map.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cin = self.spec.in_channels();
        if x.ndim() != 4 || x.shape()[1] != cin {
            return Err(Error::shape("block input", x.shape(), &[x.shape().first().copied().unwrap_or(0), cin]));
        }
        self.calls.set(self.calls.get() + 1);
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn reset_calls(&self) {
        self.calls.set(0);
    }

    pub fn parameters(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    pub(crate) fn collect(&self, out: &mut Vec<Param<T>>) {
        self.layers.iter().for_each(|l| l.collect(out));
    }

    pub(crate) fn deep_copy(&self) -> Self {
        Block {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(Layer::deep_copy).collect(),
            calls: Cell::new(0),
        }
    }
}

/// 1×1 convolution mapping a compressed student's feature channels onto
/// the pseudo teacher's channel count.
#[derive(Debug)]
pub struct AdaptationLayer<T: Element> {
    pub conv: Conv2d<T>,
}

impl<T: Element> AdaptationLayer<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, student_channels: usize, teacher_channels: usize, rng: &mut R) -> Result<Self> {
        if student_channels == 0 || teacher_channels == 0 {
            return Err(Error::InvalidSpec("adaptation layer needs non-zero channels".into()));
        }
        Ok(AdaptationLayer {
            conv: Conv2d::new(prefix, student_channels, teacher_channels, 1, 1, rng)?,
        })
    }

    pub fn student_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn teacher_channels(&self) -> usize {
        self.conv.out_channels()
    }

    /// `[N, Cs, H, W] → [N, Ct, H, W]`.
    pub fn adapt_channels(&self, student_map: &Tensor<T>) -> Result<Tensor<T>> {
        if student_map.ndim() != 4 || student_map.shape()[1] != self.student_channels() {
            return Err(Error::shape(
                "adapt_channels",
                student_map.shape(),
                &[self.student_channels()],
            ));
        }
        self.conv.forward(student_map)
    }

    pub(crate) fn collect(&self, out: &mut Vec<Param<T>>) {
        self.conv.collect(out);
    }

    pub fn parameters(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }
}
