//! Procedural anatomy-like phantoms.
//!
//! A phantom is a dark (exactly zero) background holding a large bright
//! ellipsoidal body with 2 to 4 ellipsoidal substructures inside it. Each
//! subject jitters position (up to 5% of the width), size (up to 10%) and
//! intensity (up to 10%) of every structure, and carries a faint
//! low-frequency shading across the body.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::volume::Volume;

pub const MIN_PHANTOM_EXTENT: usize = 16;

const POSITION_JITTER: f64 = 0.05;
const SIZE_JITTER: f64 = 0.10;
const INTENSITY_JITTER: f64 = 0.10;
const SHADING_AMPLITUDE: f64 = 0.08;

/// Body semi-axes as fractions of the extent along (k, j, i).
const BODY_SEMI_AXES: [f64; 3] = [0.48, 0.46, 0.46];
const BODY_INTENSITY: f64 = 0.6;

struct Template {
    /// Center offset in units of the body semi-axes.
    offset: [f64; 3],
    /// Semi-axes in units of the body semi-axes.
    size: [f64; 3],
    intensity: f64,
}

// Deliberately asymmetric in j so reflections about the j axis are visible.
const SUBSTRUCTURES: [Template; 4] = [
    Template {
        offset: [0.15, -0.35, 0.20],
        size: [0.35, 0.25, 0.30],
        intensity: 0.95,
    },
    Template {
        offset: [-0.25, 0.30, -0.25],
        size: [0.30, 0.30, 0.22],
        intensity: 0.30,
    },
    Template {
        offset: [0.35, 0.25, 0.35],
        size: [0.20, 0.20, 0.25],
        intensity: 0.85,
    },
    Template {
        offset: [-0.30, -0.20, 0.0],
        size: [0.18, 0.22, 0.35],
        intensity: 0.45,
    },
];

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
    intensity: f64,
}

impl Ellipsoid {
    /// Soft membership in [0, 1] with a transition about one voxel wide.
    fn weight(&self, p: [f64; 3]) -> f64 {
        let mut r2 = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.semi_axes[a];
            r2 += t * t;
        }
        let r = r2.sqrt();
        let min_axis = self.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        ((1.0 - r) * min_axis + 0.5).clamp(0.0, 1.0)
    }
}

fn jitter(rng: &mut SeededRng, amount: f64) -> f64 {
    rng.uniform(-amount, amount)
}

pub fn generate_phantom(rng: &mut SeededRng, shape: [usize; 3]) -> Result<Volume> {
    if shape.iter().any(|&s| s < MIN_PHANTOM_EXTENT) {
        return Err(Error::InvalidArgument(format!(
            "phantom shape {shape:?} below minimum extent {MIN_PHANTOM_EXTENT}"
        )));
    }
    let d = shape[2] as f64;
    let mut body = Ellipsoid {
        center: [0.0; 3],
        semi_axes: [0.0; 3],
        intensity: BODY_INTENSITY * (1.0 + jitter(rng, INTENSITY_JITTER)),
    };
    for a in 0..3 {
        let extent = shape[a] as f64;
        body.center[a] = (extent - 1.0) / 2.0 + jitter(rng, POSITION_JITTER * d);
        body.semi_axes[a] = BODY_SEMI_AXES[a] * extent * (1.0 + jitter(rng, SIZE_JITTER));
    }

    let count = 2 + rng.below(3);
    let subs: Vec<Ellipsoid> = SUBSTRUCTURES[..count]
        .iter()
        .map(|t| {
            let mut e = Ellipsoid {
                center: [0.0; 3],
                semi_axes: [0.0; 3],
                intensity: t.intensity * (1.0 + jitter(rng, INTENSITY_JITTER)),
            };
            for a in 0..3 {
                e.center[a] = body.center[a]
                    + t.offset[a] * body.semi_axes[a]
                    + jitter(rng, POSITION_JITTER * d);
                e.semi_axes[a] = t.size[a] * body.semi_axes[a] * (1.0 + jitter(rng, SIZE_JITTER));
            }
            e
        })
        .collect();

    let phase = [rng.uniform(0.0, TAU), rng.uniform(0.0, TAU), rng.uniform(0.0, TAU)];
    let freq = [rng.uniform(0.8, 1.6), rng.uniform(0.8, 1.6), rng.uniform(0.8, 1.6)];

    let [nk, nj, ni] = shape;
    let mut voxels = Vec::with_capacity(nk * nj * ni);
    for k in 0..nk {
        for j in 0..nj {
            for i in 0..ni {
                let p = [k as f64, j as f64, i as f64];
                let wb = body.weight(p);
                if wb <= 0.0 {
                    voxels.push(0.0);
                    continue;
                }
                let mut value = body.intensity;
                for s in &subs {
                    let w = s.weight(p);
                    value = value * (1.0 - w) + s.intensity * w;
                }
                let mut shade = 1.0;
                for a in 0..3 {
                    shade += SHADING_AMPLITUDE / 3.0
                        * (TAU * freq[a] * p[a] / shape[a] as f64 + phase[a]).sin();
                }
                voxels.push((wb * value * shade).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume::new("phantom", shape, voxels)
}

/// `count` phantoms named `phantom_0000`, ...; phantom `n` draws from
/// `SeededRng::new(seed).child(n)`.
pub fn generate_corpus(seed: u64, count: usize, shape: [usize; 3]) -> Result<Vec<Volume>> {
    let root = SeededRng::new(seed);
    (0..count)
        .into_par_iter()
        .map(|n| Ok(generate_phantom(&mut root.child(n as u64), shape)?.with_id(format!("phantom_{n:04}"))))
        .collect()
}
