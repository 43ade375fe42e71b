//! Anomaly scores from a trained model: per-pixel estimates of the
//! interpolation factor, aggregated to slices and subjects.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, Head, Mode, ModelParams, PixelPrediction, Tensor};
use crate::synth::{DISCRETE_ALPHAS, NUM_CLASSES};
use crate::volume::{extract_slice, SliceImage, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    #[default]
    Mean,
    Max,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
        }
    }

    /// Mean or maximum of `values`, accumulated in 64-bit.
    pub fn apply(self, values: impl IntoIterator<Item = f64>) -> Result<f64> {
        let (mut acc, mut n) = (match self {
            Aggregator::Mean => 0.0,
            Aggregator::Max => f64::NEG_INFINITY,
        }, 0usize);
        for v in values {
            match self {
                Aggregator::Mean => acc += v,
                Aggregator::Max => acc = acc.max(v),
            }
            n += 1;
        }
        match (self, n) {
            (_, 0) => Err(Error::InvalidArgument("nothing to aggregate".into())),
            (Aggregator::Mean, n) => Ok(acc / n as f64),
            (Aggregator::Max, _) => Ok(acc),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            other => Err(Error::InvalidArgument(format!("unknown aggregator {other:?}, expected mean or max"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub slice_aggregator: Aggregator,
    pub subject_aggregator: Aggregator,
    /// Slices per forward pass.
    pub batch_size: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            slice_aggregator: Aggregator::Mean,
            subject_aggregator: Aggregator::Max,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreProvenance {
    pub model_id: String,
    pub case_id: String,
    pub slice_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f32>,
    pub provenance: ScoreProvenance,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, scores: Vec<f32>, provenance: ScoreProvenance) -> Result<Self> {
        if scores.len() != height * width || scores.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for a {height}x{width} map",
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidData(format!("score {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            scores,
            provenance,
        })
    }
}

/// `sum_c alpha_c * p_c` over the five class values.
pub fn expected_alpha(probs: &[f64]) -> f64 {
    probs.iter().zip(DISCRETE_ALPHAS).map(|(p, a)| p * a).sum::<f64>().clamp(0.0, 1.0)
}

/// Per-sample score planes of a prediction: the sigmoid output itself, or
/// the expected interpolation factor under the softmax.
pub fn prediction_scores(pred: &PixelPrediction<f32>) -> Vec<Vec<f32>> {
    let plane = pred.h * pred.w;
    match pred.head {
        Head::Sigmoid => pred.values.chunks(plane).map(|c| c.to_vec()).collect(),
        Head::Softmax => pred
            .values
            .chunks(NUM_CLASSES * plane)
            .map(|sample| {
                (0..plane)
                    .map(|p| {
                        let probs: Vec<f64> = (0..NUM_CLASSES).map(|c| sample[c * plane + p] as f64).collect();
                        expected_alpha(&probs) as f32
                    })
                    .collect()
            })
            .collect(),
    }
}

fn check_slice(params: &ModelParams<f32>, s: &SliceImage) -> Result<()> {
    let d = params.config.input_size;
    if s.height != d || s.width != d {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} slice for a model expecting {d}x{d}",
            s.height, s.width
        )));
    }
    if let Some(bad) = s.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidData(format!("slice intensity {bad} outside [0, 1]; normalize first")));
    }
    Ok(())
}

fn score_batch(params: &ModelParams<f32>, slices: &[SliceImage]) -> Result<Vec<Vec<f32>>> {
    let d = params.config.input_size;
    let mut pixels = Vec::with_capacity(slices.len() * d * d);
    for s in slices {
        check_slice(params, s)?;
        pixels.extend_from_slice(&s.pixels);
    }
    let pred = forward(params, &Tensor::from_vec(slices.len(), 1, d, d, pixels), Mode::Eval)?;
    Ok(prediction_scores(&pred))
}

pub fn pixel_scores(params: &ModelParams<f32>, slice: &SliceImage, model_id: &str) -> Result<ScoreMap> {
    let scores = score_batch(params, std::slice::from_ref(slice))?.remove(0);
    ScoreMap::new(
        slice.height,
        slice.width,
        scores,
        ScoreProvenance {
            model_id: model_id.to_string(),
            case_id: slice.source.volume_id.clone(),
            slice_index: slice.source.index,
        },
    )
}

pub fn slice_score(map: &ScoreMap, aggregator: Aggregator) -> f64 {
    aggregator
        .apply(map.scores.iter().map(|&s| s as f64))
        .expect("score maps are nonempty")
}

pub fn subject_score(slice_scores: &[f64], aggregator: Aggregator) -> Result<f64> {
    aggregator.apply(slice_scores.iter().copied())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectScore {
    pub case_id: String,
    pub model_id: String,
    pub slice_aggregator: Aggregator,
    pub subject_aggregator: Aggregator,
    pub slice_scores: Vec<f64>,
    pub subject_score: f64,
}

impl SubjectScore {
    /// Checks that the subject score follows from the slice scores.
    pub fn verify(&self) -> Result<()> {
        let expected = subject_score(&self.slice_scores, self.subject_aggregator)?;
        if expected != self.subject_score {
            return Err(Error::InvalidData(format!(
                "subject score {} of {} does not match its slice scores ({expected})",
                self.subject_score, self.case_id
            )));
        }
        Ok(())
    }
}

/// Scores every axis-0 slice of a normalized volume. Returns the stacked
/// score volume and the subject record.
pub fn score_volume(
    params: &ModelParams<f32>,
    volume: &Volume,
    config: &ScoringConfig,
    model_id: &str,
) -> Result<(Volume, SubjectScore)> {
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("scoring batch size must be at least 1".into()));
    }
    let [depth, h, w] = volume.shape();
    let slices = (0..depth)
        .map(|k| extract_slice(volume, 0, k))
        .collect::<Result<Vec<_>>>()?;
    let planes: Vec<Vec<f32>> = slices
        .par_chunks(config.batch_size)
        .map(|batch| score_batch(params, batch))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let slice_scores = planes
        .iter()
        .map(|p| config.slice_aggregator.apply(p.iter().map(|&s| s as f64)))
        .collect::<Result<Vec<_>>>()?;
    let record = SubjectScore {
        case_id: volume.id().to_string(),
        model_id: model_id.to_string(),
        slice_aggregator: config.slice_aggregator,
        subject_aggregator: config.subject_aggregator,
        subject_score: subject_score(&slice_scores, config.subject_aggregator)?,
        slice_scores,
    };
    let map = Volume::new(format!("{}_scores", volume.id()), [depth, h, w], planes.concat())?
        .with_spacing(volume.spacing());
    Ok((map, record))
}
