//! Wide residual encoder-decoder.
//!
//! Layout for `S` stages with widths `w_0..w_{S-1}`:
//!
//! ```text
//! stem      conv3x3  in -> w_0
//! enc s     blocks_per_stage[s] pre-activation residual blocks; the first
//!           block of every stage after the first has stride 2
//! dec s     for s = S-2 down to 0: BN-ReLU-upsample2x-conv3x3 w_{s+1} -> w_s,
//!           then blocks_per_stage[s] residual blocks at w_s
//! head      BN-ReLU-conv1x1 (with bias) -> 1 or 5 channels
//! ```
//!
//! A residual block computes `conv2(relu(bn2(conv1(relu(bn1(x)))))) + sc`,
//! where `sc` is `x`, or a 1x1 convolution of `relu(bn1(x))` when the width
//! or resolution changes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::layers::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, conv2d_backward, conv2d_forward, relu,
    relu_backward, upsample2x, upsample2x_backward, BnCache, ConvGeom,
};
use super::loss::{bce_logit_grad, cce_logit_grad, sigmoid, softmax_channels, EPS};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::synth::{AlphaMode, Label, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    #[serde(rename = "sigmoid-1ch")]
    Sigmoid,
    #[serde(rename = "softmax-5ch")]
    Softmax,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Sigmoid => "sigmoid-1ch",
            Head::Softmax => "softmax-5ch",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Head::Sigmoid => 1,
            Head::Softmax => NUM_CLASSES,
        }
    }

    pub fn for_mode(mode: AlphaMode) -> Head {
        if mode.is_discrete() {
            Head::Softmax
        } else {
            Head::Sigmoid
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    pub head: Head,
    pub width_factor: usize,
    /// Base width of every stage, before the width factor.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

fn one() -> usize {
    1
}

fn default_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Full-size network: widths (16, 32, 64) x 4, depth 14; inputs of 512
    /// and above get a fourth, single-block stage for depth 16.
    pub fn full(input_size: usize, head: Head) -> Self {
        let (stage_widths, blocks_per_stage) = if input_size >= 512 {
            (vec![16, 32, 64, 128], vec![2, 2, 2, 1])
        } else {
            (vec![16, 32, 64], vec![2, 2, 2])
        };
        Self {
            input_size,
            in_channels: 1,
            head,
            width_factor: 4,
            stage_widths,
            blocks_per_stage,
            bn_momentum: default_momentum(),
            bn_eps: default_bn_eps(),
        }
    }

    /// Same topology as [`ModelConfig::full`] at depth 14 with narrow stages,
    /// sized for CPU training on 64x64 slices.
    pub fn desk(input_size: usize, head: Head) -> Self {
        Self {
            input_size,
            in_channels: 1,
            head,
            width_factor: 1,
            stage_widths: vec![4, 8, 16],
            blocks_per_stage: vec![2, 2, 2],
            bn_momentum: default_momentum(),
            bn_eps: default_bn_eps(),
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    /// Weighted layers on the main path: stem, two convolutions per encoder
    /// block, and the head.
    pub fn depth(&self) -> usize {
        2 + 2 * self.blocks_per_stage.iter().sum::<usize>()
    }

    pub fn downsampling_count(&self) -> usize {
        self.stage_widths.len().saturating_sub(1)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stage_widths.iter().map(|w| w * self.width_factor).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "{} stage widths for {} block counts",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.width_factor == 0 || self.stage_widths.contains(&0) || self.in_channels == 0 {
            return bad("widths and channel counts must be positive".into());
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        let factor = 1usize << self.downsampling_count();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return bad(format!(
                "input size {} not divisible by {factor} for {} downsamplings",
                self.input_size,
                self.downsampling_count()
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return bad("batch norm momentum must lie in (0, 1] and eps be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnOffset,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.kind.trainable())
            .map(|t| t.data.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    kind: t.kind,
                    data: t.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Checks tensor names, kinds and shapes against the layout of `config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (_, specs) = Layout::build(&self.config);
        if specs.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "config implies {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&self.tensors) {
            if spec.name != t.name || spec.shape != t.shape || spec.kind != t.kind {
                return Err(Error::ShapeMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name, spec.shape, t.name, t.shape
                )));
            }
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!("{} data length", t.name)));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

pub(crate) struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init_std: f64,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    weight: usize,
    bias: Option<usize>,
    out_c: usize,
    geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    scale: usize,
    offset: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    bn1: BnIdx,
    conv1: ConvIdx,
    bn2: BnIdx,
    conv2: ConvIdx,
    shortcut: Option<ConvIdx>,
}

#[derive(Debug, Clone)]
struct UpIdx {
    bn: BnIdx,
    conv: ConvIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    stem: ConvIdx,
    encoder: Vec<Vec<BlockIdx>>,
    decoder: Vec<(UpIdx, Vec<BlockIdx>)>,
    head_bn: BnIdx,
    head_conv: ConvIdx,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<TensorSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, init_std: f64) -> usize {
        self.specs.push(TensorSpec {
            name,
            shape,
            kind,
            init_std,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, head: bool) -> ConvIdx {
        let fan_in = (in_c * k * k) as f64;
        let gain = if head { 1.0 } else { 2.0 };
        let weight = self.push(
            format!("{name}.weight"),
            vec![out_c, in_c, k, k],
            ParamKind::Weight,
            (gain / fan_in).sqrt(),
        );
        let bias = head.then(|| self.push(format!("{name}.bias"), vec![out_c], ParamKind::Bias, 0.0));
        ConvIdx {
            weight,
            bias,
            out_c,
            geom: ConvGeom::same(k, stride),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIdx {
        BnIdx {
            scale: self.push(format!("{name}.scale"), vec![c], ParamKind::BnScale, 0.0),
            offset: self.push(format!("{name}.offset"), vec![c], ParamKind::BnOffset, 0.0),
            mean: self.push(format!("{name}.running_mean"), vec![c], ParamKind::RunningMean, 0.0),
            var: self.push(format!("{name}.running_var"), vec![c], ParamKind::RunningVar, 0.0),
        }
    }

    fn block(&mut self, name: &str, in_c: usize, out_c: usize, stride: usize) -> BlockIdx {
        BlockIdx {
            bn1: self.bn(&format!("{name}.bn1"), in_c),
            conv1: self.conv(&format!("{name}.conv1"), in_c, out_c, 3, stride, false),
            bn2: self.bn(&format!("{name}.bn2"), out_c),
            conv2: self.conv(&format!("{name}.conv2"), out_c, out_c, 3, 1, false),
            shortcut: (in_c != out_c || stride != 1)
                .then(|| self.conv(&format!("{name}.shortcut"), in_c, out_c, 1, stride, false)),
        }
    }
}

impl Layout {
    pub(crate) fn build(config: &ModelConfig) -> (Layout, Vec<TensorSpec>) {
        let widths = config.widths();
        let mut b = LayoutBuilder::default();
        let stem = b.conv("stem.conv", config.in_channels, widths[0], 3, 1, false);
        let mut encoder = Vec::new();
        let mut c = widths[0];
        for (s, (&w, &blocks)) in widths.iter().zip(&config.blocks_per_stage).enumerate() {
            let stage = (0..blocks)
                .map(|k| {
                    let stride = if s > 0 && k == 0 { 2 } else { 1 };
                    let blk = b.block(&format!("enc{s}.block{k}"), c, w, stride);
                    c = w;
                    blk
                })
                .collect();
            encoder.push(stage);
        }
        let mut decoder = Vec::new();
        for s in (0..widths.len() - 1).rev() {
            let up = UpIdx {
                bn: b.bn(&format!("dec{s}.up.bn"), c),
                conv: b.conv(&format!("dec{s}.up.conv"), c, widths[s], 3, 1, false),
            };
            c = widths[s];
            let blocks = (0..config.blocks_per_stage[s])
                .map(|k| b.block(&format!("dec{s}.block{k}"), c, c, 1))
                .collect();
            decoder.push((up, blocks));
        }
        let head_bn = b.bn("head.bn", c);
        let head_conv = b.conv("head.conv", c, config.head.channels(), 1, 1, true);
        (
            Layout {
                stem,
                encoder,
                decoder,
                head_bn,
                head_conv,
            },
            b.specs,
        )
    }
}

/// Fresh parameters: convolution kernels drawn from a zero-mean normal with
/// standard deviation `sqrt(2 / fan_in)` (`sqrt(1 / fan_in)` for the head),
/// zero biases, unit normalization scales and zero offsets.
pub fn init_model<T: Real>(config: &ModelConfig, rng: &mut SeededRng) -> Result<ModelParams<T>> {
    config.validate()?;
    let (_, specs) = Layout::build(config);
    let tensors = specs
        .into_iter()
        .map(|spec| {
            let len = spec.shape.iter().product();
            let data = match spec.kind {
                ParamKind::Weight => (0..len)
                    .map(|_| T::from_f64_lossy(rng.standard_normal() * spec.init_std))
                    .collect(),
                ParamKind::BnScale | ParamKind::RunningVar => vec![T::one(); len],
                _ => vec![T::zero(); len],
            };
            ParamTensor {
                name: spec.name,
                shape: spec.shape,
                kind: spec.kind,
                data,
            }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

/// Per-pixel network output, laid out `[n, channels, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPrediction<T> {
    pub head: Head,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<T>,
}

impl<T: Real> PixelPrediction<T> {
    pub fn new(head: Head, n: usize, h: usize, w: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != n * head.channels() * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {n}x{}x{h}x{w} prediction",
                values.len(),
                head.channels()
            )));
        }
        Ok(Self { head, n, h, w, values })
    }

    /// Pixel count over the batch, not counting channels.
    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    fn from_logits(head: Head, logits: &Tensor<T>) -> Self {
        let values = match head {
            Head::Sigmoid => logits
                .data
                .iter()
                .map(|z| T::from_f64_lossy(sigmoid(z.as_f64()).clamp(EPS, 1.0 - EPS)))
                .collect(),
            Head::Softmax => softmax_channels(&logits.data, logits.n, logits.c, logits.plane())
                .into_iter()
                .map(T::from_f64_lossy)
                .collect(),
        };
        Self {
            head,
            n: logits.n,
            h: logits.h,
            w: logits.w,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Batch statistics observed by one normalization layer during a training
/// forward pass. `var` carries Bessel's correction.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStat<T> {
    pub mean_index: usize,
    pub var_index: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Blends batch statistics into the running estimates with the configured
/// momentum.
pub fn update_running_stats<T: Real>(params: &mut ModelParams<T>, stats: &[BatchStat<T>]) {
    let m = T::from_f64_lossy(params.config.bn_momentum);
    let keep = T::one() - m;
    for st in stats {
        for (run, &b) in params.tensors[st.mean_index].data.iter_mut().zip(&st.mean) {
            *run = keep * *run + m * b;
        }
        for (run, &b) in params.tensors[st.var_index].data.iter_mut().zip(&st.var) {
            *run = keep * *run + m * b;
        }
    }
}

struct BlockCache<T> {
    bn1: BnCache<T>,
    o1: Tensor<T>,
    bn2: BnCache<T>,
    o2: Tensor<T>,
}

struct UpCache<T> {
    bn: BnCache<T>,
    o: Tensor<T>,
    u: Tensor<T>,
}

struct Trace<T> {
    input: Tensor<T>,
    encoder: Vec<Vec<BlockCache<T>>>,
    decoder: Vec<(UpCache<T>, Vec<BlockCache<T>>)>,
    head_bn: BnCache<T>,
    head_o: Tensor<T>,
}

struct Net<'a, T> {
    params: &'a ModelParams<T>,
    layout: Layout,
    train: bool,
    stats: Vec<BatchStat<T>>,
    pattern: Option<Vec<bool>>,
}

impl<'a, T: Real> Net<'a, T> {
    fn new(params: &'a ModelParams<T>, mode: Mode) -> Self {
        Self {
            params,
            layout: Layout::build(&params.config).0,
            train: mode == Mode::Train,
            stats: Vec::new(),
            pattern: None,
        }
    }

    fn data(&self, idx: usize) -> &'a [T] {
        &self.params.tensors[idx].data
    }

    fn conv(&self, x: &Tensor<T>, c: &ConvIdx) -> Tensor<T> {
        let bias = c.bias.map(|b| self.data(b));
        conv2d_forward(x, self.data(c.weight), bias, c.out_c, c.geom)
    }

    fn bn_relu(&mut self, x: &Tensor<T>, bn: &BnIdx) -> (Tensor<T>, Option<BnCache<T>>) {
        let eps = self.params.config.bn_eps;
        let (y, cache) = if self.train {
            let (y, cache) = batch_norm_train(x, self.data(bn.scale), self.data(bn.offset), eps);
            self.stats.push(BatchStat {
                mean_index: bn.mean,
                var_index: bn.var,
                mean: cache.mean.clone(),
                var: cache.unbiased_var(),
            });
            (y, Some(cache))
        } else {
            let y = batch_norm_eval(
                x,
                self.data(bn.scale),
                self.data(bn.offset),
                self.data(bn.mean),
                self.data(bn.var),
                eps,
            );
            (y, None)
        };
        if let Some(p) = &mut self.pattern {
            p.extend(y.data.iter().map(|&v| v > T::zero()));
        }
        (relu(y), cache)
    }

    fn block(&mut self, x: Tensor<T>, b: &BlockIdx) -> (Tensor<T>, Option<BlockCache<T>>) {
        let (o1, bn1) = self.bn_relu(&x, &b.bn1);
        let h = self.conv(&o1, &b.conv1);
        let (o2, bn2) = self.bn_relu(&h, &b.bn2);
        let mut y = self.conv(&o2, &b.conv2);
        match &b.shortcut {
            Some(sc) => y.add_assign(&self.conv(&o1, sc)),
            None => y.add_assign(&x),
        }
        let cache = self.train.then(|| BlockCache {
            bn1: bn1.expect("train mode caches"),
            o1,
            bn2: bn2.expect("train mode caches"),
            o2,
        });
        (y, cache)
    }

    fn up(&mut self, x: &Tensor<T>, u: &UpIdx) -> (Tensor<T>, Option<UpCache<T>>) {
        let (o, bn) = self.bn_relu(x, &u.bn);
        let up = upsample2x(&o);
        let y = self.conv(&up, &u.conv);
        let cache = self.train.then(|| UpCache {
            bn: bn.expect("train mode caches"),
            o,
            u: up,
        });
        (y, cache)
    }

    /// Returns head logits and, in training mode, everything the backward
    /// pass needs.
    fn forward(&mut self, input: Tensor<T>) -> (Tensor<T>, Option<Trace<T>>) {
        let layout = self.layout.clone();
        let mut x = self.conv(&input, &layout.stem);
        let mut enc_caches = Vec::new();
        for stage in &layout.encoder {
            let mut caches = Vec::new();
            for blk in stage {
                let (y, c) = self.block(x, blk);
                x = y;
                caches.extend(c);
            }
            enc_caches.push(caches);
        }
        let mut dec_caches = Vec::new();
        for (up, blocks) in &layout.decoder {
            let (y, uc) = self.up(&x, up);
            x = y;
            let mut caches = Vec::new();
            for blk in blocks {
                let (y, c) = self.block(x, blk);
                x = y;
                caches.extend(c);
            }
            if let Some(uc) = uc {
                dec_caches.push((uc, caches));
            }
        }
        let (o, hbn) = self.bn_relu(&x, &layout.head_bn);
        let logits = self.conv(&o, &layout.head_conv);
        let trace = hbn.map(|head_bn| Trace {
            input,
            encoder: enc_caches,
            decoder: dec_caches,
            head_bn,
            head_o: o,
        });
        (logits, trace)
    }
}

struct Backward<'a, T> {
    params: &'a ModelParams<T>,
    grads: Vec<Vec<T>>,
}

impl<'a, T: Real> Backward<'a, T> {
    fn accumulate(&mut self, idx: usize, g: &[T]) {
        let slot = &mut self.grads[idx];
        if slot.is_empty() {
            slot.extend_from_slice(g);
        } else {
            slot.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }

    fn conv(&mut self, x: &Tensor<T>, c: &ConvIdx, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let g = conv2d_backward(x, &self.params.tensors[c.weight].data, dy, c.geom, need_dx);
        self.accumulate(c.weight, &g.dweight);
        if let Some(b) = c.bias {
            self.accumulate(b, &g.dbias);
        }
        g.dx
    }

    fn bn_relu(&mut self, mut dy: Tensor<T>, out: &Tensor<T>, cache: &BnCache<T>, bn: &BnIdx) -> Tensor<T> {
        relu_backward(&mut dy, out);
        let g = batch_norm_backward(&dy, cache, &self.params.tensors[bn.scale].data);
        self.accumulate(bn.scale, &g.dscale);
        self.accumulate(bn.offset, &g.doffset);
        g.dx
    }

    fn block(&mut self, dy: Tensor<T>, b: &BlockIdx, c: &BlockCache<T>) -> Tensor<T> {
        let d_o2 = self.conv(&c.o2, &b.conv2, &dy, true).expect("dx requested");
        let d_h = self.bn_relu(d_o2, &c.o2, &c.bn2, &b.bn2);
        let mut d_o1 = self.conv(&c.o1, &b.conv1, &d_h, true).expect("dx requested");
        match &b.shortcut {
            Some(sc) => {
                let d_sc = self.conv(&c.o1, sc, &dy, true).expect("dx requested");
                d_o1.add_assign(&d_sc);
                self.bn_relu(d_o1, &c.o1, &c.bn1, &b.bn1)
            }
            None => {
                let mut dx = self.bn_relu(d_o1, &c.o1, &c.bn1, &b.bn1);
                dx.add_assign(&dy);
                dx
            }
        }
    }

    fn up(&mut self, dy: Tensor<T>, u: &UpIdx, c: &UpCache<T>) -> Tensor<T> {
        let d_u = self.conv(&c.u, &u.conv, &dy, true).expect("dx requested");
        let d_o = upsample2x_backward(&d_u);
        self.bn_relu(d_o, &c.o, &c.bn, &u.bn)
    }

    fn run(mut self, layout: &Layout, trace: &Trace<T>, d_logits: Tensor<T>) -> Vec<Vec<T>> {
        let d_o = self.conv(&trace.head_o, &layout.head_conv, &d_logits, true).expect("dx requested");
        let mut dx = self.bn_relu(d_o, &trace.head_o, &trace.head_bn, &layout.head_bn);
        for ((up, blocks), (uc, caches)) in layout.decoder.iter().zip(&trace.decoder).rev() {
            for (blk, c) in blocks.iter().zip(caches).rev() {
                dx = self.block(dx, blk, c);
            }
            dx = self.up(dx, up, uc);
        }
        for (stage, caches) in layout.encoder.iter().zip(&trace.encoder).rev() {
            for (blk, c) in stage.iter().zip(caches).rev() {
                dx = self.block(dx, blk, c);
            }
        }
        self.conv(&trace.input, &layout.stem, &dx, false);
        self.grads
    }
}

fn check_input<T: Real>(params: &ModelParams<T>, images: &Tensor<T>) -> Result<()> {
    let cfg = &params.config;
    if images.c != cfg.in_channels || images.h != cfg.input_size || images.w != cfg.input_size {
        return Err(Error::ShapeMismatch(format!(
            "batch of {}x{}x{} images for a model expecting {}x{}x{}",
            images.c, images.h, images.w, cfg.in_channels, cfg.input_size, cfg.input_size
        )));
    }
    if images.n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !images.is_finite() {
        return Err(Error::NonFinite("input batch".into()));
    }
    Ok(())
}

pub fn forward<T: Real>(params: &ModelParams<T>, images: &Tensor<T>, mode: Mode) -> Result<PixelPrediction<T>> {
    forward_with_stats(params, images, mode).map(|(p, _)| p)
}

/// Forward pass that also returns the batch statistics seen by every
/// normalization layer (empty in [`Mode::Eval`]).
pub fn forward_with_stats<T: Real>(
    params: &ModelParams<T>,
    images: &Tensor<T>,
    mode: Mode,
) -> Result<(PixelPrediction<T>, Vec<BatchStat<T>>)> {
    check_input(params, images)?;
    let mut net = Net::new(params, mode);
    let (logits, _) = net.forward(images.clone());
    if !logits.is_finite() {
        return Err(Error::NonFinite("network activations".into()));
    }
    Ok((PixelPrediction::from_logits(params.config.head, &logits), net.stats))
}

/// Which ReLU units are active, concatenated over every layer. Finite
/// difference checks use it to detect steps that cross a kink.
pub fn relu_pattern<T: Real>(params: &ModelParams<T>, images: &Tensor<T>, mode: Mode) -> Result<Vec<bool>> {
    check_input(params, images)?;
    let mut net = Net::new(params, mode);
    net.pattern = Some(Vec::new());
    net.forward(images.clone());
    Ok(net.pattern.unwrap_or_default())
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// Scaled mean loss over the batch.
    pub loss: f64,
    /// One entry per parameter tensor; empty for running statistics.
    pub grads: Vec<Vec<T>>,
    pub batch_stats: Vec<BatchStat<T>>,
}

/// Loss of a training-mode forward pass and its gradient with respect to
/// every trainable tensor, both multiplied by `loss_scale`. Soft labels use
/// binary cross-entropy with a sigmoid head, class labels categorical
/// cross-entropy with a softmax head.
pub fn gradients<T: Real>(
    params: &ModelParams<T>,
    images: &Tensor<T>,
    labels: &Label,
    loss_scale: f64,
) -> Result<Gradients<T>> {
    check_input(params, images)?;
    let pixels = images.n * images.h * images.w;
    if labels.len() != pixels {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {pixels} pixels",
            labels.len()
        )));
    }
    let mut net = Net::new(params, Mode::Train);
    let (logits, trace) = net.forward(images.clone());
    if !logits.is_finite() {
        return Err(Error::NonFinite("network activations".into()));
    }
    let (loss, d) = match (params.config.head, labels) {
        (Head::Sigmoid, Label::Soft(a)) => {
            if let Some(bad) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidData(format!("soft label {bad} outside [0, 1]")));
            }
            bce_logit_grad(&logits.data, a, loss_scale)
        }
        (Head::Softmax, Label::Classes(c)) => {
            if let Some(bad) = c.iter().find(|&&v| v as usize >= NUM_CLASSES) {
                return Err(Error::InvalidData(format!("class index {bad} outside 0..{NUM_CLASSES}")));
            }
            cce_logit_grad(&logits.data, c, logits.n, logits.plane(), loss_scale)
        }
        (head, _) => {
            return Err(Error::InvalidArgument(format!(
                "label kind does not match the {head:?} head"
            )))
        }
    };
    let d_logits = Tensor::from_vec(logits.n, logits.c, logits.h, logits.w, d);
    let backward = Backward {
        params,
        grads: vec![Vec::new(); params.tensors.len()],
    };
    let trace = trace.expect("train mode records a trace");
    let grads = backward.run(&net.layout, &trace, d_logits);
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss or gradient".into()));
    }
    Ok(Gradients {
        loss,
        grads,
        batch_stats: net.stats,
    })
}

/// Name to tensor position lookup.
pub fn tensor_index<T>(params: &ModelParams<T>) -> HashMap<&str, usize> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| (t.name.as_str(), i))
        .collect()
}
