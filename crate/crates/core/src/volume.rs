//! Volumes, slices, and the raw-plus-sidecar file format.
//!
//! A volume is stored as two files: `<name>.raw` holding the voxels as
//! little-endian 32-bit floats in C order (depth, height, width), and
//! `<name>.json` holding the shape, dtype, spacing and id.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE_F32_LE: &str = "float32-le";

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    id: String,
    shape: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub id: String,
    pub shape: [usize; 3],
    pub dtype: String,
    pub spacing: [f64; 3],
}

impl Volume {
    /// Builds a volume from voxels in (k, j, i) row-major order.
    pub fn new(id: impl Into<String>, shape: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("empty axis in shape {shape:?}")));
        }
        if voxels.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(pos) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {pos} is {}", voxels[pos])));
        }
        Ok(Self {
            id: id.into(),
            shape,
            spacing: [1.0; 3],
            voxels,
        })
    }

    pub fn zeros(id: impl Into<String>, shape: [usize; 3]) -> Self {
        let n = shape.iter().product();
        Self::new(id, shape, vec![0.0; n]).expect("zero volume is valid")
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Image width `d` (extent of the fastest axis).
    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    /// Mutable voxel access. Callers must keep values finite.
    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, k: usize, j: usize, i: usize) -> usize {
        (k * self.shape[1] + j) * self.shape[2] + i
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize, i: usize) -> f32 {
        self.voxels[self.index(k, j, i)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, j: usize, i: usize, value: f32) {
        let idx = self.index(k, j, i);
        self.voxels[idx] = value;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            id: self.id.clone(),
            shape: self.shape,
            dtype: DTYPE_F32_LE.to_string(),
            spacing: self.spacing,
        }
    }
}

/// Sidecar path for a payload path: same stem, `.json` extension.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in &volume.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let header = serde_json::to_string_pretty(&volume.header())
        .map_err(|e| Error::json(&sidecar, e))?;
    fs::write(&sidecar, header).map_err(|e| Error::io(&sidecar, e))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        return Err(Error::MissingSidecar(sidecar));
    }
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::json(&sidecar, e))?;
    if header.dtype != DTYPE_F32_LE {
        return Err(Error::InvalidData(format!(
            "{}: unsupported dtype {:?}",
            sidecar.display(),
            header.dtype
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = header.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{}: sidecar shape {:?} needs {expected} bytes, payload has {}",
            path.display(),
            header.shape,
            bytes.len()
        )));
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume::new(header.id, header.shape, voxels)?.with_spacing(header.spacing))
}

/// Per-volume min-max rescale to `[0, 1]`. A constant volume maps to zeros.
pub fn normalize(volume: &Volume) -> Result<Volume> {
    if volume.voxels.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("volume {}", volume.id)));
    }
    let (lo, hi) = volume.min_max();
    let mut out = volume.clone();
    if hi > lo {
        let lo = lo as f64;
        let range = hi as f64 - lo;
        for v in &mut out.voxels {
            *v = ((*v as f64 - lo) / range) as f32;
        }
    } else {
        out.voxels.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSource {
    pub volume_id: String,
    pub axis: usize,
    pub index: usize,
}

/// A 2D image copied out of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub source: SliceSource,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, source: SliceSource) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "slice {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            source,
        })
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f32 {
        self.pixels[j * self.width + i]
    }

    /// Wraps the slice as a single-slice volume of shape (1, height, width).
    pub fn to_volume(&self, id: impl Into<String>) -> Volume {
        Volume::new(id, [1, self.height, self.width], self.pixels.clone())
            .expect("slice pixels match slice shape")
    }
}

/// Copies slice `index` along `axis` (0 = depth, 1 = height, 2 = width).
pub fn extract_slice(volume: &Volume, axis: usize, index: usize) -> Result<SliceImage> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {axis} not in 0..=2")));
    }
    let [nk, nj, ni] = volume.shape;
    let extent = volume.shape[axis];
    if index >= extent {
        return Err(Error::IndexOutOfRange {
            axis,
            index,
            extent,
        });
    }
    let (height, width, pixels) = match axis {
        0 => {
            let start = index * nj * ni;
            (nj, ni, volume.voxels[start..start + nj * ni].to_vec())
        }
        1 => {
            let mut px = Vec::with_capacity(nk * ni);
            for k in 0..nk {
                let start = volume.index(k, index, 0);
                px.extend_from_slice(&volume.voxels[start..start + ni]);
            }
            (nk, ni, px)
        }
        _ => {
            let mut px = Vec::with_capacity(nk * nj);
            for k in 0..nk {
                for j in 0..nj {
                    px.push(volume.get(k, j, index));
                }
            }
            (nk, nj, px)
        }
    };
    SliceImage::new(
        height,
        width,
        pixels,
        SliceSource {
            volume_id: volume.id.clone(),
            axis,
            index,
        },
    )
}
