//! Central-difference verification of the analytic gradients.

use super::model::{gradients, relu_pattern, Mode, ModelParams};
use super::tensor::Tensor;
use crate::error::Result;
use crate::synth::Label;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    /// `|g - fd| / max(|g|, |fd|)` over the checked components.
    pub relative_error: f64,
    pub checked: usize,
    /// Components whose `+step` or `-step` evaluation flipped a ReLU unit.
    pub kink_crossings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares the analytic gradient of every trainable tensor with central
/// differences of the loss. A difference whose step moves any ReLU unit across
/// its kink measures a different piece of the piecewise-smooth loss; such
/// components are counted and left out of the error.
pub fn check_gradients(
    params: &ModelParams<f64>,
    images: &Tensor<f64>,
    labels: &Label,
    step: f64,
) -> Result<GradCheckReport> {
    let analytic = gradients(params, images, labels, 1.0)?;
    let base = relu_pattern(params, images, Mode::Train)?;
    let mut probe = params.clone();
    let mut groups = Vec::new();
    for ti in 0..params.tensors.len() {
        if !params.tensors[ti].kind.trainable() {
            continue;
        }
        let (mut diff, mut norm_a, mut norm_f) = (0.0f64, 0.0f64, 0.0f64);
        let (mut checked, mut crossings) = (0, 0);
        for e in 0..params.tensors[ti].data.len() {
            let orig = params.tensors[ti].data[e];
            let mut eval = |x: f64| -> Result<(f64, bool)> {
                probe.tensors[ti].data[e] = x;
                let loss = gradients(&probe, images, labels, 1.0)?.loss;
                let same = relu_pattern(&probe, images, Mode::Train)? == base;
                Ok((loss, same))
            };
            let (up, same_up) = eval(orig + step)?;
            let (dn, same_dn) = eval(orig - step)?;
            probe.tensors[ti].data[e] = orig;
            if !(same_up && same_dn) {
                crossings += 1;
                continue;
            }
            let fd = (up - dn) / (2.0 * step);
            let a = analytic.grads[ti][e];
            diff += (a - fd).powi(2);
            norm_a += a * a;
            norm_f += fd * fd;
            checked += 1;
        }
        let scale = norm_a.sqrt().max(norm_f.sqrt());
        groups.push(GroupCheck {
            name: params.tensors[ti].name.clone(),
            relative_error: if scale > 0.0 { diff.sqrt() / scale } else { 0.0 },
            checked,
            kink_crossings: crossings,
        });
    }
    Ok(GradCheckReport { step, groups })
}
