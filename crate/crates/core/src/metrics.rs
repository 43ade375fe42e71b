//! Ranking metrics for anomaly scores: average precision, area under the
//! ROC curve, and the best DICE over a threshold sweep.
//!
//! All three are computed from one descending sort in which tied scores
//! form a single rank step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact threshold sweeps are used below this many scores; larger inputs
/// sweep a quantile grid.
pub const EXACT_SWEEP_LIMIT: usize = 1_000_000;
/// Quantile spacing of the large-input threshold grid.
pub const QUANTILE_STEP: f64 = 0.001;

/// One group of tied scores, with counts accumulated from the top.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankStep {
    pub score: f64,
    /// Positives with score >= `score`.
    pub tp: u64,
    /// Negatives with score >= `score`.
    pub fp: u64,
}

/// Scores sorted high to low and grouped by value.
#[derive(Debug, Clone)]
pub struct Ranking {
    pub steps: Vec<RankStep>,
    pub positives: u64,
    pub negatives: u64,
}

impl Ranking {
    pub fn new(scores: &[f64], labels: &[bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {bad}")));
        }
        let mut order: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
        order.par_sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        let mut steps: Vec<RankStep> = Vec::new();
        let (mut tp, mut fp) = (0u64, 0u64);
        for (i, &(s, l)) in order.iter().enumerate() {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
            if order.get(i + 1).is_none_or(|next| next.0 != s) {
                steps.push(RankStep { score: s, tp, fp });
            }
        }
        Ok(Self {
            steps,
            positives: tp,
            negatives: fp,
        })
    }

    fn need_positives(&self, what: &str) -> Result<()> {
        if self.positives == 0 {
            return Err(Error::InvalidData(format!("{what} needs at least one positive")));
        }
        Ok(())
    }

    /// `sum_k (R_k - R_{k-1}) P_k` over the rank steps.
    pub fn average_precision(&self) -> Result<f64> {
        self.need_positives("average precision")?;
        let p = self.positives as f64;
        let mut prev_tp = 0u64;
        let mut ap = 0.0;
        for s in &self.steps {
            if s.tp > prev_tp {
                ap += (s.tp - prev_tp) as f64 / p * (s.tp as f64 / (s.tp + s.fp) as f64);
            }
            prev_tp = s.tp;
        }
        Ok(ap)
    }

    /// Probability that a random positive outscores a random negative, ties
    /// counting one half.
    pub fn auroc(&self) -> Result<f64> {
        if self.positives == 0 || self.negatives == 0 {
            return Err(Error::InvalidData("AUROC needs both positives and negatives".into()));
        }
        let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
        let mut wins = 0.0f64;
        for s in &self.steps {
            let (pg, ng) = ((s.tp - prev_tp) as f64, (s.fp - prev_fp) as f64);
            wins += pg * ((self.negatives - s.fp) as f64 + 0.5 * ng);
            prev_tp = s.tp;
            prev_fp = s.fp;
        }
        Ok(wins / (self.positives as f64 * self.negatives as f64))
    }

    /// Positive and negative counts at or above `threshold`.
    pub fn counts_at(&self, threshold: f64) -> (u64, u64) {
        let k = self.steps.partition_point(|s| s.score >= threshold);
        match k {
            0 => (0, 0),
            k => (self.steps[k - 1].tp, self.steps[k - 1].fp),
        }
    }

    /// DICE of the prediction `score >= threshold`.
    pub fn dice_at(&self, threshold: f64) -> f64 {
        let (tp, fp) = self.counts_at(threshold);
        dice(tp, fp, self.positives - tp)
    }

    /// Largest DICE over the candidate thresholds and the threshold reaching
    /// it; the lowest such threshold wins ties.
    pub fn dice_ceiling(&self) -> Result<DiceCeiling> {
        self.need_positives("DICE")?;
        let total = (self.positives + self.negatives) as usize;
        let mut best = DiceCeiling {
            dice: f64::NEG_INFINITY,
            threshold: f64::NAN,
        };
        let mut consider = |t: f64, d: f64| {
            if d > best.dice || (d == best.dice && t < best.threshold) {
                best = DiceCeiling { dice: d, threshold: t };
            }
        };
        if total < EXACT_SWEEP_LIMIT {
            for s in &self.steps {
                consider(s.score, dice(s.tp, s.fp, self.positives - s.tp));
            }
        } else {
            for t in self.quantile_grid() {
                consider(t, self.dice_at(t));
            }
        }
        consider(0.5, self.dice_at(0.5));
        Ok(best)
    }

    /// Distinct scores at quantiles 0, 0.001, ..., 1.
    pub fn quantile_grid(&self) -> Vec<f64> {
        let total = self.positives + self.negatives;
        let n = (1.0 / QUANTILE_STEP).round() as u64;
        let mut grid: Vec<f64> = (0..=n)
            .map(|i| {
                // Score of the element at rank ceil(q * total) from the bottom.
                let from_top = total - ((i as f64 / n as f64) * (total - 1) as f64).round() as u64;
                let k = self.steps.partition_point(|s| s.tp + s.fp < from_top);
                self.steps[k.min(self.steps.len() - 1)].score
            })
            .collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid
    }

    /// ROC points `(fpr, tpr, threshold)` from the strictest threshold down.
    pub fn roc_curve(&self) -> Vec<[f64; 3]> {
        let (p, n) = (self.positives.max(1) as f64, self.negatives.max(1) as f64);
        self.steps
            .iter()
            .map(|s| [s.fp as f64 / n, s.tp as f64 / p, s.score])
            .collect()
    }

    /// Precision-recall points `(recall, precision, threshold)`.
    pub fn pr_curve(&self) -> Vec<[f64; 3]> {
        let p = self.positives.max(1) as f64;
        self.steps
            .iter()
            .map(|s| [s.tp as f64 / p, s.tp as f64 / (s.tp + s.fp) as f64, s.score])
            .collect()
    }
}

fn dice(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceCeiling {
    pub dice: f64,
    pub threshold: f64,
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ranking::new(scores, labels)?.average_precision()
}

pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ranking::new(scores, labels)?.auroc()
}

pub fn dice_ceiling(scores: &[f64], labels: &[bool]) -> Result<DiceCeiling> {
    Ranking::new(scores, labels)?.dice_ceiling()
}

/// Keeps at most `max_points` curve points, always including both ends.
pub fn thin_curve(points: &[[f64; 3]], max_points: usize) -> Vec<[f64; 3]> {
    if points.len() <= max_points || max_points < 2 {
        return points.to_vec();
    }
    let last = points.len() - 1;
    let mut idx: Vec<usize> = (0..max_points).map(|i| i * last / (max_points - 1)).collect();
    idx.dedup();
    idx.into_iter().map(|i| points[i]).collect()
}
