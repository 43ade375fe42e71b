//! Per-pixel cross-entropy losses and their gradients with respect to the
//! head logits. Both clamp the argument of every logarithm to `[EPS, 1]`.

use super::model::{Head, PixelPrediction};
use super::tensor::Real;
use crate::error::{Error, Result};
use crate::synth::NUM_CLASSES;

pub const EPS: f64 = 1e-7;

fn check_len(pred_pixels: usize, labels: usize) -> Result<()> {
    if pred_pixels != labels {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {pred_pixels} pixels, label has {labels}"
        )));
    }
    Ok(())
}

fn check_soft(labels: &[f32]) -> Result<()> {
    match labels.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        Some(a) => Err(Error::InvalidData(format!("soft label {a} outside [0, 1]"))),
        None => Ok(()),
    }
}

fn check_classes(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&c| c as usize >= NUM_CLASSES) {
        Some(c) => Err(Error::InvalidData(format!("class index {c} outside 0..{NUM_CLASSES}"))),
        None => Ok(()),
    }
}

fn bce_term(y: f64, a: f64) -> f64 {
    let y = y.clamp(EPS, 1.0 - EPS);
    -a * y.ln() - (1.0 - a) * (1.0 - y).ln()
}

/// Mean binary cross-entropy against soft targets.
pub fn loss_bce<T: Real>(pred: &PixelPrediction<T>, labels: &[f32]) -> Result<f64> {
    if pred.head != Head::Sigmoid {
        return Err(Error::InvalidArgument("binary cross-entropy needs a sigmoid head".into()));
    }
    check_len(pred.pixels(), labels.len())?;
    check_soft(labels)?;
    let total: f64 = pred
        .values
        .iter()
        .zip(labels)
        .map(|(&y, &a)| bce_term(y.as_f64(), a as f64))
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean categorical cross-entropy against class indices.
pub fn loss_cce<T: Real>(pred: &PixelPrediction<T>, labels: &[u8]) -> Result<f64> {
    if pred.head != Head::Softmax {
        return Err(Error::InvalidArgument("categorical cross-entropy needs a softmax head".into()));
    }
    check_len(pred.pixels(), labels.len())?;
    check_classes(labels)?;
    let plane = pred.h * pred.w;
    let mut total = 0.0;
    for (p, &c) in labels.iter().enumerate() {
        let (s, q) = (p / plane, p % plane);
        let prob = pred.values[(s * NUM_CLASSES + c as usize) * plane + q].as_f64();
        total -= prob.clamp(EPS, 1.0).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Loss and its gradient with respect to the logits, both multiplied by
/// `scale`. A clamped logarithm contributes no gradient.
pub(crate) fn bce_logit_grad<T: Real>(logits: &[T], labels: &[f32], scale: f64) -> (f64, Vec<T>) {
    let m = labels.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &a)| {
            let s = sigmoid(z.as_f64());
            let a = a as f64;
            loss += bce_term(s, a);
            let mut g = 0.0;
            if s > EPS {
                g -= a * (1.0 - s);
            }
            if 1.0 - s > EPS {
                g += (1.0 - a) * s;
            }
            T::from_f64_lossy(g * scale / m)
        })
        .collect();
    (loss * scale / m, grad)
}

pub(crate) fn cce_logit_grad<T: Real>(
    logits: &[T],
    labels: &[u8],
    n: usize,
    plane: usize,
    scale: f64,
) -> (f64, Vec<T>) {
    let m = labels.len() as f64;
    let probs = softmax_channels(logits, n, NUM_CLASSES, plane);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    for s in 0..n {
        for q in 0..plane {
            let c = labels[s * plane + q] as usize;
            let at = |k: usize| (s * NUM_CLASSES + k) * plane + q;
            let pt = probs[at(c)];
            loss -= pt.clamp(EPS, 1.0).ln();
            if pt <= EPS {
                continue;
            }
            for k in 0..NUM_CLASSES {
                let onehot = if k == c { 1.0 } else { 0.0 };
                grad[at(k)] = T::from_f64_lossy((probs[at(k)] - onehot) * scale / m);
            }
        }
    }
    (loss * scale / m, grad)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Softmax over the channel axis of an `[n, channels, plane]` buffer.
pub(crate) fn softmax_channels<T: Real>(logits: &[T], n: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for s in 0..n {
        for q in 0..plane {
            let at = |k: usize| (s * channels + k) * plane + q;
            let max = (0..channels).map(|k| logits[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..channels {
                let e = (logits[at(k)].as_f64() - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..channels {
                out[at(k)] /= sum;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigmoid_pred(values: Vec<f64>, h: usize, w: usize) -> PixelPrediction<f64> {
        PixelPrediction::new(Head::Sigmoid, values.len() / (h * w), h, w, values).unwrap()
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let l = loss_bce(&sigmoid_pred(vec![0.5; 4], 2, 2), &[0.5; 4]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_vanishes_for_zero_target_and_prediction() {
        let l = loss_bce(&sigmoid_pred(vec![1e-12; 1], 1, 1), &[0.0]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn bce_grid_minimum_at_target_and_convex() {
        let a = 0.3f32;
        let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
        let vals: Vec<f64> = grid
            .iter()
            .map(|&y| loss_bce(&sigmoid_pred(vec![y], 1, 1), &[a]).unwrap())
            .collect();
        let best = (0..vals.len()).min_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap();
        assert!((grid[best] - 0.3).abs() < 1e-9);
        for i in 1..vals.len() - 1 {
            assert!(vals[i - 1] + vals[i + 1] - 2.0 * vals[i] > 0.0);
        }
    }

    #[test]
    fn bce_rejects_bad_labels() {
        assert!(matches!(
            loss_bce(&sigmoid_pred(vec![0.5], 1, 1), &[1.5]),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn cce_uniform_is_ln5() {
        let pred = PixelPrediction::new(Head::Softmax, 1, 1, 2, vec![0.2f64; 10]).unwrap();
        let l = loss_cce(&pred, &[0, 3]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cce_certain_true_class_is_zero() {
        let pred = PixelPrediction::new(Head::Softmax, 1, 1, 1, vec![0.0f64, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(loss_cce(&pred, &[2]).unwrap().abs() < 1e-12);
        assert!(loss_cce(&pred, &[7]).is_err());
    }

    #[test]
    fn cce_matches_double_loop() {
        let mut rng = crate::rng::SeededRng::new(11);
        let (n, h, w) = (2, 3, 4);
        let mut values = vec![0.0f64; n * NUM_CLASSES * h * w];
        for s in 0..n {
            for q in 0..h * w {
                let raw: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.unit() + 0.01).collect();
                let sum: f64 = raw.iter().sum();
                for k in 0..NUM_CLASSES {
                    values[(s * NUM_CLASSES + k) * h * w + q] = raw[k] / sum;
                }
            }
        }
        let labels: Vec<u8> = (0..n * h * w).map(|_| rng.below(NUM_CLASSES) as u8).collect();
        let pred = PixelPrediction::new(Head::Softmax, n, h, w, values.clone()).unwrap();
        let mut want = 0.0;
        for s in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let c = labels[(s * h + y) * w + x] as usize;
                    want -= values[((s * NUM_CLASSES + c) * h + y) * w + x].ln();
                }
            }
        }
        want /= (n * h * w) as f64;
        assert!((loss_cce(&pred, &labels).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let logits = [-1.3f64, 0.2, 2.5, 0.0];
        let labels = [0.0f32, 0.3, 1.0, 0.75];
        let (_, g) = bce_logit_grad(&logits, &labels, 1.0);
        for i in 0..4 {
            let mut up = logits;
            let mut dn = logits;
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            let fd = (bce_logit_grad(&up, &labels, 1.0).0 - bce_logit_grad(&dn, &labels, 1.0).0) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
