//! Foreign patch interpolation samples.
//!
//! A training sample blends a square patch of slice `A` with the same region
//! of slice `B` from another subject, `A'_i = (1 - alpha) A_i + alpha B_i`,
//! and labels every changed pixel of the patch with `alpha`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::volume::{save_volume, SliceImage, SliceSource};

/// Class values of the discrete interpolation factor.
pub const DISCRETE_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const NUM_CLASSES: usize = DISCRETE_ALPHAS.len();

pub const MIN_PATCH_IMAGE: usize = 16;

/// Half-open pixel rectangle `[j0, j1) x [i0, i1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBounds {
    pub j0: usize,
    pub i0: usize,
    pub j1: usize,
    pub i1: usize,
}

impl PatchBounds {
    pub fn contains(&self, j: usize, i: usize) -> bool {
        (self.j0..self.j1).contains(&j) && (self.i0..self.i1).contains(&i)
    }

    pub fn area(&self) -> usize {
        (self.j1 - self.j0) * (self.i1 - self.i0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Patch center (j, i) in pixels.
    pub center: [f64; 2],
    /// Nominal side length in pixels.
    pub side: f64,
    pub bounds: PatchBounds,
}

impl PatchSpec {
    /// Rasterizes a square of side `side` centered at `center`, rounding the
    /// edges to integers and clipping to a `d x d` image.
    pub fn new(center: [f64; 2], side: f64, d: usize) -> Result<Self> {
        let half = side / 2.0;
        let lo = |c: f64| ((c - half).round().max(0.0) as usize).min(d);
        let hi = |c: f64| ((c + half).round().max(0.0) as usize).min(d);
        let bounds = PatchBounds {
            j0: lo(center[0]),
            i0: lo(center[1]),
            j1: hi(center[0]),
            i1: hi(center[1]),
        };
        if bounds.j0 >= bounds.j1 || bounds.i0 >= bounds.i1 {
            return Err(Error::InvalidArgument(format!(
                "patch at {center:?} with side {side} is empty in a {d}x{d} image"
            )));
        }
        Ok(Self {
            center,
            side,
            bounds,
        })
    }
}

/// Side ~ U(0.1 d, 0.4 d), center ~ U(0.1 d, 0.9 d) per coordinate.
pub fn sample_patch_spec(rng: &mut SeededRng, d: usize) -> Result<PatchSpec> {
    if d < MIN_PATCH_IMAGE {
        return Err(Error::InvalidArgument(format!(
            "image width {d} below minimum {MIN_PATCH_IMAGE}"
        )));
    }
    let df = d as f64;
    let side = rng.uniform(0.1 * df, 0.4 * df);
    let cj = rng.uniform(0.1 * df, 0.9 * df);
    let ci = rng.uniform(0.1 * df, 0.9 * df);
    PatchSpec::new([cj, ci], side, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    Continuous,
    Discrete,
    Binary,
    ContinuousRoundUp,
}

impl AlphaMode {
    pub const ALL: [AlphaMode; 4] = [
        AlphaMode::Continuous,
        AlphaMode::Discrete,
        AlphaMode::Binary,
        AlphaMode::ContinuousRoundUp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlphaMode::Continuous => "continuous",
            AlphaMode::Discrete => "discrete",
            AlphaMode::Binary => "binary",
            AlphaMode::ContinuousRoundUp => "continuous-round-up",
        }
    }

    pub fn is_discrete(self) -> bool {
        self == AlphaMode::Discrete
    }
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlphaMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown alpha mode {s:?}; expected one of continuous, discrete, binary, continuous-round-up"
                ))
            })
    }
}

pub fn sample_alpha(rng: &mut SeededRng, mode: AlphaMode) -> f64 {
    match mode {
        AlphaMode::Continuous | AlphaMode::ContinuousRoundUp => rng.unit(),
        AlphaMode::Discrete => DISCRETE_ALPHAS[rng.below(NUM_CLASSES)],
        AlphaMode::Binary => {
            if rng.coin() {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Class index of a discrete alpha value.
pub fn alpha_class(alpha: f64) -> Option<u8> {
    DISCRETE_ALPHAS
        .iter()
        .position(|&v| v == alpha)
        .map(|c| c as u8)
}

/// Pixel-wise training target.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    /// Per-pixel interpolation factor in [0, 1].
    Soft(Vec<f32>),
    /// Per-pixel class index into [`DISCRETE_ALPHAS`].
    Classes(Vec<u8>),
}

impl Label {
    pub fn len(&self) -> usize {
        match self {
            Label::Soft(v) => v.len(),
            Label::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-pixel alpha values; class indices are mapped through the table.
    pub fn alpha_values(&self) -> Vec<f32> {
        match self {
            Label::Soft(v) => v.clone(),
            Label::Classes(c) => c.iter().map(|&c| DISCRETE_ALPHAS[c as usize] as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpiSample {
    pub input: SliceImage,
    pub label: Label,
    pub alpha: f64,
    pub mode: AlphaMode,
    pub patch: PatchSpec,
    pub sources: (String, String),
}

pub fn interpolate(
    a: &SliceImage,
    b: &SliceImage,
    patch: &PatchSpec,
    alpha: f64,
    mode: AlphaMode,
) -> Result<FpiSample> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch(format!(
            "slices {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let pb = patch.bounds;
    if pb.j1 > a.height || pb.i1 > a.width {
        return Err(Error::ShapeMismatch(format!(
            "patch {pb:?} exceeds {}x{} image",
            a.height, a.width
        )));
    }
    let class = if mode.is_discrete() {
        Some(alpha_class(alpha).ok_or_else(|| {
            Error::InvalidArgument(format!("alpha {alpha} is not a discrete class value"))
        })?)
    } else {
        None
    };
    let label_value = match mode {
        AlphaMode::ContinuousRoundUp if alpha > 0.0 => 1.0,
        _ => alpha as f32,
    };

    let mut pixels = a.pixels.clone();
    let n = a.pixels.len();
    let mut soft = vec![0.0f32; if class.is_none() { n } else { 0 }];
    let mut classes = vec![0u8; if class.is_some() { n } else { 0 }];
    for j in pb.j0..pb.j1 {
        for i in pb.i0..pb.i1 {
            let idx = j * a.width + i;
            let (av, bv) = (a.pixels[idx], b.pixels[idx]);
            pixels[idx] = ((1.0 - alpha) * av as f64 + alpha * bv as f64) as f32;
            if av != bv {
                match class {
                    Some(c) => classes[idx] = c,
                    None => soft[idx] = label_value,
                }
            }
        }
    }
    let label = if class.is_some() {
        Label::Classes(classes)
    } else {
        Label::Soft(soft)
    };
    Ok(FpiSample {
        input: SliceImage::new(a.height, a.width, pixels, a.source.clone())?,
        label,
        alpha,
        mode,
        patch: *patch,
        sources: (a.source.volume_id.clone(), b.source.volume_id.clone()),
    })
}

/// Draws a patch and an alpha for one pair and interpolates.
pub fn synthesize(
    a: &SliceImage,
    b: &SliceImage,
    rng: &mut SeededRng,
    mode: AlphaMode,
) -> Result<FpiSample> {
    let patch = sample_patch_spec(rng, a.width)?;
    let alpha = sample_alpha(rng, mode);
    interpolate(a, b, &patch, alpha, mode)
}

/// `batch_size` fresh samples; sample `s` uses pair `s % pairs.len()` and its
/// own child generator `rng.child(s)`, so the batch is independent of
/// evaluation order.
pub fn make_training_batch(
    pairs: &[(SliceImage, SliceImage)],
    rng: &SeededRng,
    mode: AlphaMode,
    batch_size: usize,
) -> Result<Vec<FpiSample>> {
    if pairs.is_empty() {
        return Err(Error::InvalidData("no slice pairs to sample from".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    (0..batch_size)
        .into_par_iter()
        .map(|s| {
            let (a, b) = &pairs[s % pairs.len()];
            synthesize(a, b, &mut rng.child(s as u64), mode)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub input: String,
    pub label: String,
    pub alpha: f64,
    pub patch: PatchSpec,
    pub source_a: SliceSource,
    pub source_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleIndex {
    pub mode: AlphaMode,
    pub seed: u64,
    /// Label files hold alpha values; for discrete mode these are drawn from this table.
    pub class_values: Vec<f64>,
    pub samples: Vec<SampleRecord>,
}

/// Writes each sample as an `(input, label)` pair of single-slice volumes plus
/// `index.json`. Labels are exported as per-pixel alpha values.
pub fn export_samples(samples: &[FpiSample], seed: u64, mode: AlphaMode, dir: &Path) -> Result<SampleIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (n, s) in samples.iter().enumerate() {
        let input = format!("sample_{n:05}_input.raw");
        let label = format!("sample_{n:05}_label.raw");
        save_volume(&s.input.to_volume(format!("sample_{n:05}_input")), &dir.join(&input))?;
        let lv = crate::volume::Volume::new(
            format!("sample_{n:05}_label"),
            [1, s.input.height, s.input.width],
            s.label.alpha_values(),
        )?;
        save_volume(&lv, &dir.join(&label))?;
        records.push(SampleRecord {
            input,
            label,
            alpha: s.alpha,
            patch: s.patch,
            source_a: s.input.source.clone(),
            source_b: s.sources.1.clone(),
        });
    }
    let index = SampleIndex {
        mode,
        seed,
        class_values: DISCRETE_ALPHAS.to_vec(),
        samples: records,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}
