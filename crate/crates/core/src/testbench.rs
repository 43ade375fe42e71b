//! Synthetic anomaly test set: spherical regions altered by one of five
//! generators (uniform addition, noise addition, sink/source deformation,
//! uniform shift, reflection), each with its ground-truth sphere mask.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::volume::{load_volume, save_volume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestbenchConfig {
    /// Sphere diameter range as fractions of the image width.
    pub diameter_fraction: [f64; 2],
    /// Minimum distance in voxels between the sphere and every face.
    pub margin: f64,
    /// Per-axis shift magnitude range as fractions of the image width.
    pub shift_fraction: [f64; 2],
    /// Axis mirrored by the reflection generator.
    pub reflection_axis: usize,
}

impl Default for TestbenchConfig {
    fn default() -> Self {
        Self {
            diameter_fraction: [0.1, 0.3],
            margin: 2.0,
            shift_fraction: [0.02, 0.05],
            reflection_axis: 1,
        }
    }
}

/// Generator with its drawn parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Anomaly {
    UniformAddition { intensity: f64 },
    NoiseAddition { noise_seed: u64 },
    Source,
    Sink,
    /// Offset along (k, j, i) in voxels; `A'(p) = A(p + offset)`.
    UniformShift { offset: [f64; 3] },
    Reflection { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    UniformAddition,
    NoiseAddition,
    Source,
    Sink,
    UniformShift,
    Reflection,
}

/// The five generator classes; sink and source share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyClass {
    UniformAddition,
    NoiseAddition,
    SinkSource,
    UniformShift,
    Reflection,
}

impl AnomalyClass {
    pub const ALL: [AnomalyClass; 5] = [
        AnomalyClass::UniformAddition,
        AnomalyClass::NoiseAddition,
        AnomalyClass::SinkSource,
        AnomalyClass::UniformShift,
        AnomalyClass::Reflection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyClass::UniformAddition => "uniform-addition",
            AnomalyClass::NoiseAddition => "noise-addition",
            AnomalyClass::SinkSource => "sink-source",
            AnomalyClass::UniformShift => "uniform-shift",
            AnomalyClass::Reflection => "reflection",
        }
    }
}

impl fmt::Display for AnomalyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Anomaly {
    pub fn kind(&self) -> AnomalyKind {
        match self {
            Anomaly::UniformAddition { .. } => AnomalyKind::UniformAddition,
            Anomaly::NoiseAddition { .. } => AnomalyKind::NoiseAddition,
            Anomaly::Source => AnomalyKind::Source,
            Anomaly::Sink => AnomalyKind::Sink,
            Anomaly::UniformShift { .. } => AnomalyKind::UniformShift,
            Anomaly::Reflection { .. } => AnomalyKind::Reflection,
        }
    }

    pub fn class(&self) -> AnomalyClass {
        match self {
            Anomaly::UniformAddition { .. } => AnomalyClass::UniformAddition,
            Anomaly::NoiseAddition { .. } => AnomalyClass::NoiseAddition,
            Anomaly::Source | Anomaly::Sink => AnomalyClass::SinkSource,
            Anomaly::UniformShift { .. } => AnomalyClass::UniformShift,
            Anomaly::Reflection { .. } => AnomalyClass::Reflection,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereAnomalySpec {
    /// Sphere center in (k, j, i) voxel coordinates.
    pub center: [f64; 3],
    pub diameter: f64,
    pub anomaly: Anomaly,
}

impl SphereAnomalySpec {
    pub fn radius(&self) -> f64 {
        self.diameter / 2.0
    }

    fn offset_from_center(&self, k: usize, j: usize, i: usize) -> [f64; 3] {
        [
            k as f64 - self.center[0],
            j as f64 - self.center[1],
            i as f64 - self.center[2],
        ]
    }

    /// `||p - center||_2 <= diameter / 2`.
    pub fn contains(&self, k: usize, j: usize, i: usize) -> bool {
        let d = self.offset_from_center(k, j, i);
        let r = self.radius();
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r * r
    }

    /// Voxels inside the sphere, in raster order.
    pub fn voxels(&self, shape: [usize; 3]) -> Vec<[usize; 3]> {
        let r = self.radius();
        let range = |a: usize| {
            let lo = (self.center[a] - r).floor().max(0.0) as usize;
            let hi = ((self.center[a] + r).ceil().max(0.0) as usize).min(shape[a].saturating_sub(1));
            lo..=hi
        };
        let mut out = Vec::new();
        for k in range(0) {
            for j in range(1) {
                for i in range(2) {
                    if k < shape[0] && j < shape[1] && i < shape[2] && self.contains(k, j, i) {
                        out.push([k, j, i]);
                    }
                }
            }
        }
        out
    }

    pub fn mask(&self, shape: [usize; 3]) -> Volume {
        let mut m = Volume::zeros("mask", shape);
        for [k, j, i] in self.voxels(shape) {
            m.set(k, j, i, 1.0);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub volume: Volume,
    /// 1 inside the sphere, 0 elsewhere.
    pub mask: Volume,
    pub subject_label: u8,
    pub spec: SphereAnomalySpec,
}

/// Draws diameter ~ U(0.1 d, 0.3 d), a center keeping the sphere `margin`
/// voxels from every face, a generator class uniformly over five (sink and
/// source splitting theirs evenly), and the generator parameters.
pub fn sample_sphere(
    rng: &mut SeededRng,
    shape: [usize; 3],
    config: &TestbenchConfig,
) -> Result<SphereAnomalySpec> {
    let d = shape[2] as f64;
    let [flo, fhi] = config.diameter_fraction;
    if !(0.0 < flo && flo <= fhi) {
        return Err(Error::InvalidArgument(format!(
            "bad diameter range {:?}",
            config.diameter_fraction
        )));
    }
    // Feasibility is checked for the largest diameter so every draw fits.
    let r_max = fhi * d / 2.0;
    for (a, &n) in shape.iter().enumerate() {
        if (n as f64 - 1.0) - 2.0 * (r_max + config.margin) < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "axis {a} of extent {n} cannot hold a sphere of diameter {} with margin {}",
                2.0 * r_max,
                config.margin
            )));
        }
    }
    let diameter = rng.uniform(flo * d, fhi * d);
    let r = diameter / 2.0;
    let mut center = [0.0; 3];
    for a in 0..3 {
        let lo = r + config.margin;
        let hi = shape[a] as f64 - 1.0 - r - config.margin;
        center[a] = rng.uniform(lo, hi);
    }
    let anomaly = match AnomalyClass::ALL[rng.below(AnomalyClass::ALL.len())] {
        AnomalyClass::UniformAddition => Anomaly::UniformAddition {
            intensity: rng.standard_normal(),
        },
        AnomalyClass::NoiseAddition => Anomaly::NoiseAddition {
            noise_seed: rand::RngCore::next_u64(rng),
        },
        AnomalyClass::SinkSource => {
            if rng.coin() {
                Anomaly::Sink
            } else {
                Anomaly::Source
            }
        }
        AnomalyClass::UniformShift => {
            let [slo, shi] = config.shift_fraction;
            let mut offset = [0.0; 3];
            for o in &mut offset {
                let magnitude = rng.uniform(slo * d, shi * d);
                *o = if rng.coin() { magnitude } else { -magnitude };
            }
            Anomaly::UniformShift { offset }
        }
        AnomalyClass::Reflection => Anomaly::Reflection {
            axis: config.reflection_axis,
        },
    };
    Ok(SphereAnomalySpec {
        center,
        diameter,
        anomaly,
    })
}

fn case_from(volume: Volume, spec: &SphereAnomalySpec) -> TestCase {
    let mask = spec.mask(volume.shape()).with_id(format!("{}_mask", volume.id()));
    TestCase {
        volume,
        mask,
        subject_label: 1,
        spec: *spec,
    }
}

fn wrong_kind(expected: &str, spec: &SphereAnomalySpec) -> Error {
    Error::InvalidArgument(format!(
        "expected a {expected} spec, got {:?}",
        spec.anomaly.kind()
    ))
}

/// `A'_i = clip(A_i + n)` inside the sphere.
pub fn apply_uniform_addition(v: &Volume, spec: &SphereAnomalySpec) -> Result<TestCase> {
    let Anomaly::UniformAddition { intensity } = spec.anomaly else {
        return Err(wrong_kind("uniform-addition", spec));
    };
    let mut out = v.clone();
    for [k, j, i] in spec.voxels(v.shape()) {
        let x = v.get(k, j, i) as f64 + intensity;
        out.set(k, j, i, x.clamp(0.0, 1.0) as f32);
    }
    Ok(case_from(out, spec))
}

/// The raw `N(0, 1)` draws of a noise-addition spec, one per sphere voxel in
/// raster order.
pub fn noise_field(spec: &SphereAnomalySpec, shape: [usize; 3]) -> Result<Vec<([usize; 3], f64)>> {
    let Anomaly::NoiseAddition { noise_seed } = spec.anomaly else {
        return Err(wrong_kind("noise-addition", spec));
    };
    let mut rng = SeededRng::new(noise_seed);
    Ok(spec
        .voxels(shape)
        .into_iter()
        .map(|p| (p, rng.standard_normal()))
        .collect())
}

/// `A'_i = clip(A_i + n_i)` inside the sphere with i.i.d. `n_i ~ N(0, 1)`.
pub fn apply_noise_addition(v: &Volume, spec: &SphereAnomalySpec) -> Result<TestCase> {
    let mut out = v.clone();
    for ([k, j, i], n) in noise_field(spec, v.shape())? {
        let x = v.get(k, j, i) as f64 + n;
        out.set(k, j, i, x.clamp(0.0, 1.0) as f32);
    }
    Ok(case_from(out, spec))
}

/// Trilinear sample at a real (k, j, i) position, clamped to the volume.
pub fn trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let shape = v.shape();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let max = (shape[a] - 1) as f64;
        let x = p[a].clamp(0.0, max);
        let b = (x.floor() as usize).min(shape[a].saturating_sub(2));
        base[a] = b;
        frac[a] = x - b as f64;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let up = (corner >> (2 - a)) & 1 == 1;
            if up {
                w *= frac[a];
                idx[a] = (base[a] + 1).min(shape[a] - 1);
            } else {
                w *= 1.0 - frac[a];
                idx[a] = base[a];
            }
        }
        if w != 0.0 {
            acc += w * v.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc
}

/// Sampling position of the sink/source deformation for voxel `p`.
///
/// With `s = (||p - c|| / r)^2`: source samples `c + s (p - c)`, sink samples
/// `p + (1 - s) (p - c)`.
pub fn deformation_source_point(spec: &SphereAnomalySpec, p: [usize; 3]) -> Result<[f64; 3]> {
    let d = spec.offset_from_center(p[0], p[1], p[2]);
    let r = spec.radius();
    let s = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (r * r);
    let mut v = [0.0; 3];
    for a in 0..3 {
        v[a] = match spec.anomaly {
            Anomaly::Source => spec.center[a] + s * d[a],
            Anomaly::Sink => p[a] as f64 + (1.0 - s) * d[a],
            _ => return Err(wrong_kind("sink or source", spec)),
        };
    }
    Ok(v)
}

pub fn apply_sink_source(v: &Volume, spec: &SphereAnomalySpec) -> Result<TestCase> {
    if !matches!(spec.anomaly, Anomaly::Sink | Anomaly::Source) {
        return Err(wrong_kind("sink or source", spec));
    }
    let mut out = v.clone();
    for p in spec.voxels(v.shape()) {
        let q = deformation_source_point(spec, p)?;
        out.set(p[0], p[1], p[2], trilinear(v, q).clamp(0.0, 1.0) as f32);
    }
    Ok(case_from(out, spec))
}

/// `A'(p) = A(round(p + offset))`, clamped to the volume.
pub fn apply_uniform_shift(v: &Volume, spec: &SphereAnomalySpec) -> Result<TestCase> {
    let Anomaly::UniformShift { offset } = spec.anomaly else {
        return Err(wrong_kind("uniform-shift", spec));
    };
    let shape = v.shape();
    let mut out = v.clone();
    for p in spec.voxels(shape) {
        let mut q = [0usize; 3];
        for a in 0..3 {
            let x = (p[a] as f64 + offset[a]).round();
            q[a] = x.clamp(0.0, (shape[a] - 1) as f64) as usize;
        }
        out.set(p[0], p[1], p[2], v.get(q[0], q[1], q[2]));
    }
    Ok(case_from(out, spec))
}

/// Mirrors the sphere contents about the volume's mid-plane along `axis`:
/// coordinate `x` reads from `n - 1 - x`.
pub fn apply_reflection(v: &Volume, spec: &SphereAnomalySpec) -> Result<TestCase> {
    let Anomaly::Reflection { axis } = spec.anomaly else {
        return Err(wrong_kind("reflection", spec));
    };
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("reflection axis {axis} not in 0..=2")));
    }
    let shape = v.shape();
    let mut out = v.clone();
    for p in spec.voxels(shape) {
        let mut q = p;
        q[axis] = shape[axis] - 1 - p[axis];
        out.set(p[0], p[1], p[2], v.get(q[0], q[1], q[2]));
    }
    Ok(case_from(out, spec))
}

pub fn apply_anomaly(v: &Volume, spec: &SphereAnomalySpec) -> Result<TestCase> {
    match spec.anomaly {
        Anomaly::UniformAddition { .. } => apply_uniform_addition(v, spec),
        Anomaly::NoiseAddition { .. } => apply_noise_addition(v, spec),
        Anomaly::Source | Anomaly::Sink => apply_sink_source(v, spec),
        Anomaly::UniformShift { .. } => apply_uniform_shift(v, spec),
        Anomaly::Reflection { .. } => apply_reflection(v, spec),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub cases: Vec<TestCase>,
    pub normals: Vec<Volume>,
}

/// One anomaly per source volume (case `n` uses `rng.child(n)`); normal
/// volumes pass through unchanged.
pub fn build_testset(
    anomaly_sources: &[Volume],
    normals: &[Volume],
    rng: &SeededRng,
    config: &TestbenchConfig,
) -> Result<TestSet> {
    if anomaly_sources.is_empty() || normals.is_empty() {
        return Err(Error::InvalidData(format!(
            "test set needs anomaly sources and normal volumes, got {} and {}",
            anomaly_sources.len(),
            normals.len()
        )));
    }
    let cases = anomaly_sources
        .par_iter()
        .enumerate()
        .map(|(n, v)| {
            let spec = sample_sphere(&mut rng.child(n as u64), v.shape(), config)?;
            apply_anomaly(v, &spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TestSet {
        cases,
        normals: normals.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestRecord {
    pub id: String,
    pub volume: String,
    /// Mask file; absent for normal subjects (empty mask).
    pub mask: Option<String>,
    pub subject_label: u8,
    pub source_id: String,
    pub class: Option<AnomalyClass>,
    pub spec: Option<SphereAnomalySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSetIndex {
    pub seed: u64,
    pub config: TestbenchConfig,
    pub records: Vec<TestRecord>,
}

impl TestSetIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    pub fn load_volume(&self, dir: &Path, record: &TestRecord) -> Result<Volume> {
        load_volume(&dir.join(&record.volume))
    }

    /// Mask of a record; normal subjects get an all-zero mask.
    pub fn load_mask(&self, dir: &Path, record: &TestRecord, shape: [usize; 3]) -> Result<Volume> {
        match &record.mask {
            Some(m) => {
                let mask = load_volume(&dir.join(m))?;
                if mask.shape() != shape {
                    return Err(Error::ShapeMismatch(format!(
                        "mask of {} has shape {:?}, volume {:?}",
                        record.id,
                        mask.shape(),
                        shape
                    )));
                }
                Ok(mask)
            }
            None => Ok(Volume::zeros(format!("{}_mask", record.id), shape)),
        }
    }
}

pub fn write_testset(
    set: &TestSet,
    seed: u64,
    config: &TestbenchConfig,
    dir: &Path,
) -> Result<TestSetIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    for (n, case) in set.cases.iter().enumerate() {
        let id = format!("case_{n:04}");
        let volume = format!("{id}.raw");
        let mask = format!("{id}_mask.raw");
        save_volume(&case.volume.clone().with_id(id.clone()), &dir.join(&volume))?;
        save_volume(&case.mask.clone().with_id(format!("{id}_mask")), &dir.join(&mask))?;
        records.push(TestRecord {
            id,
            volume,
            mask: Some(mask),
            subject_label: case.subject_label,
            source_id: case.volume.id().to_string(),
            class: Some(case.spec.anomaly.class()),
            spec: Some(case.spec),
        });
    }
    for (n, v) in set.normals.iter().enumerate() {
        let id = format!("normal_{n:04}");
        let volume = format!("{id}.raw");
        save_volume(&v.clone().with_id(id.clone()), &dir.join(&volume))?;
        records.push(TestRecord {
            id,
            volume,
            mask: None,
            subject_label: 0,
            source_id: v.id().to_string(),
            class: None,
            spec: None,
        });
    }
    let index = TestSetIndex {
        seed,
        config: *config,
        records,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}
