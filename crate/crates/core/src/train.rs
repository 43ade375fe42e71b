//! Training loops: Adam over freshly synthesized batches, and the optional
//! stochastic weight averaging (SWA) phase.
//!
//! Randomness is organized per epoch: epoch `e` pairs volumes and shuffles
//! slice pairs with `mix_seed(seed, e)`, and batch `b` of that epoch
//! synthesizes its samples from `mix_seed(epoch_seed, b)`. The SWA epochs
//! continue the same numbering after the main run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{materialize_pair, pair_indices};
use crate::nn::{forward_with_stats, gradients, update_running_stats, Head, Mode, ModelParams, Real, Tensor};
use crate::rng::{mix_seed, SeededRng};
use crate::synth::{make_training_batch, AlphaMode, FpiSample, Label};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwaSchedule {
    /// Linear decay from the high to the low rate within every epoch.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwaConfig {
    pub epochs: usize,
    pub lr_low: f64,
    pub lr_high: f64,
    pub schedule: SwaSchedule,
}

impl Default for SwaConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_low: 1e-4,
            lr_high: 1e-3,
            schedule: SwaSchedule::LinearDecay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha_mode: AlphaMode,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub swa: SwaConfig,
    /// Stop each epoch after this many batches; `None` uses every slice pair.
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn new(alpha_mode: AlphaMode, seed: u64) -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 16,
            alpha_mode,
            seed,
            adam: AdamConfig::default(),
            swa: SwaConfig::default(),
            max_batches_per_epoch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.max_batches_per_epoch == Some(0) {
            return bad("max batches per epoch must be at least 1");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam decay rates must lie in [0, 1) and eps be positive");
        }
        let s = &self.swa;
        if !(s.lr_low > 0.0 && s.lr_low < s.lr_high && s.lr_high.is_finite()) {
            return bad("swa learning-rate range needs 0 < low < high");
        }
        Ok(())
    }
}

/// Adam moment accumulators, kept in 64-bit regardless of parameter type.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<T: Real>(params: &ModelParams<T>, config: AdamConfig) -> Self {
        let zeros = |t: &crate::nn::ParamTensor<T>| {
            if t.kind.trainable() {
                vec![0.0; t.data.len()]
            } else {
                Vec::new()
            }
        };
        Self {
            step: 0,
            config,
            m: params.tensors.iter().map(zeros).collect(),
            v: params.tensors.iter().map(zeros).collect(),
        }
    }

    /// One bias-corrected Adam update of every trainable tensor.
    pub fn apply<T: Real>(&mut self, params: &mut ModelParams<T>, grads: &[Vec<T>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (ti, t) in params.tensors.iter_mut().enumerate() {
            if !t.kind.trainable() {
                continue;
            }
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for (e, p) in t.data.iter_mut().enumerate() {
                let g = grads[ti][e].as_f64();
                m[e] = beta1 * m[e] + (1.0 - beta1) * g;
                v[e] = beta2 * v[e] + (1.0 - beta2) * g * g;
                let update = lr * (m[e] / c1) / ((v[e] / c2).sqrt() + eps);
                *p = T::from_f64_lossy(p.as_f64() - update);
            }
        }
    }
}

/// Plain gradient descent step on the trainable tensors.
pub fn sgd_step<T: Real>(params: &mut ModelParams<T>, grads: &[Vec<T>], lr: f64) {
    for (t, g) in params.tensors.iter_mut().zip(grads) {
        if t.kind.trainable() {
            for (p, &g) in t.data.iter_mut().zip(g) {
                *p = T::from_f64_lossy(p.as_f64() - lr * g.as_f64());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub wall_time_s: f64,
}

/// Stacks samples into an image batch and a matching label.
pub fn collate(samples: &[FpiSample]) -> Result<(Tensor<f32>, Label)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.input.height, first.input.width);
    let mut pixels = Vec::with_capacity(samples.len() * h * w);
    let mut label = match &first.label {
        Label::Soft(_) => Label::Soft(Vec::with_capacity(pixels.capacity())),
        Label::Classes(_) => Label::Classes(Vec::with_capacity(pixels.capacity())),
    };
    for s in samples {
        if (s.input.height, s.input.width) != (h, w) {
            return Err(Error::ShapeMismatch("samples of different sizes in one batch".into()));
        }
        pixels.extend_from_slice(&s.input.pixels);
        match (&mut label, &s.label) {
            (Label::Soft(dst), Label::Soft(src)) => dst.extend_from_slice(src),
            (Label::Classes(dst), Label::Classes(src)) => dst.extend_from_slice(src),
            _ => return Err(Error::InvalidData("mixed label kinds in one batch".into())),
        }
    }
    Ok((Tensor::from_vec(samples.len(), 1, h, w, pixels), label))
}

fn check_setup(volumes: &[Volume], params: &ModelParams<f32>, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    params.validate()?;
    if volumes.len() < 2 {
        return Err(Error::InvalidData(format!(
            "training needs at least 2 volumes, got {}",
            volumes.len()
        )));
    }
    let shape = volumes[0].shape();
    let d = params.config.input_size;
    if shape[1] != d || shape[2] != d {
        return Err(Error::ShapeMismatch(format!(
            "volume slices are {}x{}, model expects {d}x{d}",
            shape[1], shape[2]
        )));
    }
    if params.config.head != Head::for_mode(config.alpha_mode) {
        return Err(Error::InvalidArgument(format!(
            "{} labels need the {:?} head",
            config.alpha_mode,
            Head::for_mode(config.alpha_mode)
        )));
    }
    Ok(())
}

/// Synthesized batches of one epoch, produced lazily.
struct EpochBatches<'a> {
    volumes: &'a [Volume],
    pairs: Vec<crate::manifest::SlicePairIndex>,
    epoch_seed: u64,
    batch_size: usize,
    mode: AlphaMode,
    count: usize,
}

impl<'a> EpochBatches<'a> {
    fn new(volumes: &'a [Volume], config: &TrainConfig, epoch: usize) -> Result<Self> {
        let epoch_seed = mix_seed(config.seed, epoch as u64);
        let pairs = pair_indices(volumes, epoch_seed)?;
        let full = pairs.len().div_ceil(config.batch_size);
        Ok(Self {
            volumes,
            pairs,
            epoch_seed,
            batch_size: config.batch_size,
            mode: config.alpha_mode,
            count: config.max_batches_per_epoch.map_or(full, |m| m.min(full)),
        })
    }

    fn batch(&self, b: usize) -> Result<(Tensor<f32>, Label)> {
        let chunk = &self.pairs[b * self.batch_size..((b + 1) * self.batch_size).min(self.pairs.len())];
        let slices = chunk
            .iter()
            .map(|&idx| materialize_pair(self.volumes, idx))
            .collect::<Result<Vec<_>>>()?;
        let rng = SeededRng::new(mix_seed(self.epoch_seed, b as u64));
        let samples = make_training_batch(&slices, &rng, self.mode, slices.len())?;
        collate(&samples)
    }
}

fn non_finite(phase: &str, epoch: usize, batch: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} during {phase} epoch {epoch}, batch {batch}")),
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<EpochRecord>,
}

/// Adam training. `on_epoch` sees every epoch record together with the
/// parameters at the end of that epoch.
pub fn train(
    volumes: &[Volume],
    init: ModelParams<f32>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams<f32>),
) -> Result<TrainOutcome> {
    check_setup(volumes, &init, config)?;
    let start = Instant::now();
    let mut params = init;
    let mut opt = OptimState::new(&params, config.adam);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = EpochBatches::new(volumes, config, epoch)?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for b in 0..batches.count {
            let (images, labels) = batches.batch(b)?;
            let g = gradients(&params, &images, &labels, 1.0).map_err(|e| non_finite("training", epoch, b, e))?;
            opt.apply(&mut params, &g.grads, config.learning_rate);
            update_running_stats(&mut params, &g.batch_stats);
            loss_sum += g.loss * images.n as f64;
            seen += images.n;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / seen.max(1) as f64,
            lr: config.learning_rate,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {} mean loss {:.6}", epoch, record.mean_loss);
        on_epoch(&record, &params);
        log.push(record);
    }
    Ok(TrainOutcome { params, log })
}

/// Learning rate of step `b` out of `steps` in an SWA epoch: linear from
/// `lr_high` at the first step to exactly `lr_low` at the last.
pub fn swa_learning_rate(swa: &SwaConfig, b: usize, steps: usize) -> f64 {
    match swa.schedule {
        SwaSchedule::LinearDecay => {
            if steps <= 1 || b + 1 >= steps {
                swa.lr_low
            } else {
                swa.lr_high - (swa.lr_high - swa.lr_low) * b as f64 / (steps - 1) as f64
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SwaOutcome {
    /// Average of the snapshots with refreshed normalization statistics.
    pub params: ModelParams<f32>,
    /// Plain average of the snapshots, before the statistics refresh.
    pub averaged: ModelParams<f32>,
    pub snapshots: Vec<ModelParams<f32>>,
    /// Learning rate of every step, in order.
    pub lr_trace: Vec<f64>,
    pub log: Vec<EpochRecord>,
}

/// Elementwise mean of parameter sets sharing one layout.
pub fn average_params(sets: &[ModelParams<f32>]) -> Result<ModelParams<f32>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let mut out = first.clone();
    for (ti, t) in out.tensors.iter_mut().enumerate() {
        for (e, v) in t.data.iter_mut().enumerate() {
            let mut sum = 0.0f64;
            for s in sets {
                let other = s.tensors.get(ti).filter(|o| o.shape == t.shape).ok_or_else(|| {
                    Error::ShapeMismatch(format!("snapshot layout differs at {}", t.name))
                })?;
                sum += other.data[e] as f64;
            }
            *v = (sum / sets.len() as f64) as f32;
        }
    }
    Ok(out)
}

/// Recomputes every running mean and variance as the plain average of the
/// batch statistics over one pass of freshly synthesized training batches.
pub fn refresh_batch_norm(
    volumes: &[Volume],
    params: &mut ModelParams<f32>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    let batches = EpochBatches::new(volumes, config, epoch)?;
    let mut sums: Vec<Vec<f64>> = params
        .tensors
        .iter()
        .map(|t| if t.kind.trainable() { Vec::new() } else { vec![0.0; t.data.len()] })
        .collect();
    for b in 0..batches.count {
        let (images, _) = batches.batch(b)?;
        let (_, stats) = forward_with_stats(params, &images, Mode::Train)?;
        for st in stats {
            sums[st.mean_index].iter_mut().zip(&st.mean).for_each(|(a, &m)| *a += m as f64);
            sums[st.var_index].iter_mut().zip(&st.var).for_each(|(a, &v)| *a += v as f64);
        }
    }
    let n = batches.count.max(1) as f64;
    for (t, s) in params.tensors.iter_mut().zip(&sums) {
        if !t.kind.trainable() {
            t.data.iter_mut().zip(s).for_each(|(v, &sum)| *v = (sum / n) as f32);
        }
    }
    Ok(())
}

/// SWA phase after `config.epochs` epochs of main training: `swa.epochs`
/// epochs of plain gradient descent with a per-epoch decaying learning rate,
/// a snapshot at the end of every epoch, the snapshot average, and a
/// normalization-statistics refresh.
pub fn swa_finetune(
    volumes: &[Volume],
    start: ModelParams<f32>,
    config: &TrainConfig,
    mut on_snapshot: impl FnMut(usize, &ModelParams<f32>) -> Result<()>,
) -> Result<SwaOutcome> {
    check_setup(volumes, &start, config)?;
    let swa = &config.swa;
    if swa.epochs == 0 {
        return Err(Error::InvalidArgument("swa needs at least one epoch".into()));
    }
    let clock = Instant::now();
    let mut params = start;
    let mut snapshots = Vec::with_capacity(swa.epochs);
    let mut lr_trace = Vec::new();
    let mut log = Vec::with_capacity(swa.epochs);
    for k in 0..swa.epochs {
        let epoch = config.epochs + k;
        let batches = EpochBatches::new(volumes, config, epoch)?;
        let (mut loss_sum, mut seen, mut lr) = (0.0, 0usize, swa.lr_low);
        for b in 0..batches.count {
            let (images, labels) = batches.batch(b)?;
            let g = gradients(&params, &images, &labels, 1.0).map_err(|e| non_finite("swa", epoch, b, e))?;
            lr = swa_learning_rate(swa, b, batches.count);
            sgd_step(&mut params, &g.grads, lr);
            update_running_stats(&mut params, &g.batch_stats);
            lr_trace.push(lr);
            loss_sum += g.loss * images.n as f64;
            seen += images.n;
        }
        on_snapshot(k, &params)?;
        snapshots.push(params.clone());
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / seen.max(1) as f64,
            lr,
            wall_time_s: clock.elapsed().as_secs_f64(),
        };
        log::info!("swa epoch {} mean loss {:.6}", epoch, record.mean_loss);
        log.push(record);
    }
    let averaged = average_params(&snapshots)?;
    let mut params = averaged.clone();
    refresh_batch_norm(volumes, &mut params, config, config.epochs + swa.epochs)?;
    Ok(SwaOutcome {
        params,
        averaged,
        snapshots,
        lr_trace,
        log,
    })
}
