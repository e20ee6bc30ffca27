//! Volume containers and grid geometry.
//!
//! Voxel data is indexed with x fastest: `index = x + nx * (y + ny * z)`.
//! Multi-contrast intensities are held voxel-major in memory (`data[i * n + c]`),
//! which keeps the per-voxel likelihood evaluations contiguous.

pub(crate) mod io;
mod resample;

pub use io::{
    read_image, read_labels, read_mask, read_probability, write_image, write_labels, write_mask,
    write_probability, MVOL_MAGIC, MVOL_VERSION,
};
pub use resample::resample_affine;

use nalgebra::{Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default floor applied to intensities before taking the logarithm.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    affine: Matrix4<f64>,
}

impl VolumeGrid {
    /// Grid with an axis-aligned voxel-to-world affine and origin at the first voxel.
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let affine = Matrix4::new(
            voxel_size[0], 0.0, 0.0, 0.0, //
            0.0, voxel_size[1], 0.0, 0.0, //
            0.0, 0.0, voxel_size[2], 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        Self::with_affine(dims, voxel_size, affine)
    }

    pub fn isotropic(n: usize) -> Self {
        Self::new([n, n, n], [1.0; 3]).expect("valid isotropic grid")
    }

    pub fn with_affine(dims: [usize; 3], voxel_size: [f64; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "voxel sizes must be positive, got {voxel_size:?}"
            )));
        }
        if affine.iter().any(|v| !v.is_finite()) || affine.try_inverse().is_none() {
            return Err(Error::Singular("grid affine is not invertible".into()));
        }
        Ok(Self { dims, voxel_size, affine })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// World (mm) position of a voxel center.
    pub fn voxel_to_world(&self, v: [f64; 3]) -> Vector3<f64> {
        let p = self.affine * Vector4::new(v[0], v[1], v[2], 1.0);
        Vector3::new(p.x, p.y, p.z)
    }

    pub fn world_to_voxel(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let inv = self.affine.try_inverse().expect("validated invertible");
        let v = inv * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector3::new(v.x, v.y, v.z)
    }

    /// Same lattice, regardless of which affine produced it.
    pub fn same_shape(&self, other: &VolumeGrid) -> bool {
        self.dims == other.dims
    }

    pub fn check_same(&self, other: &VolumeGrid, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GridMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Contrast {
    T1w,
    T2w,
    Flair,
    Pd,
    Other,
}

impl Contrast {
    pub fn tag(self) -> u8 {
        match self {
            Contrast::T1w => 0,
            Contrast::T2w => 1,
            Contrast::Flair => 2,
            Contrast::Pd => 3,
            Contrast::Other => 255,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Contrast::T1w),
            1 => Some(Contrast::T2w),
            2 => Some(Contrast::Flair),
            3 => Some(Contrast::Pd),
            255 => Some(Contrast::Other),
            _ => None,
        }
    }
}

impl std::str::FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" | "T1W" => Ok(Contrast::T1w),
            "T2" | "T2W" => Ok(Contrast::T2w),
            "FLAIR" => Ok(Contrast::Flair),
            "PD" => Ok(Contrast::Pd),
            "OTHER" => Ok(Contrast::Other),
            other => Err(Error::InvalidInput(format!("unknown contrast tag '{other}'"))),
        }
    }
}

/// Multi-contrast image: `I` voxels by `N` contrasts.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiContrastImage {
    grid: VolumeGrid,
    data: Vec<f64>,
    contrasts: Vec<Contrast>,
    log_domain: bool,
}

impl MultiContrastImage {
    /// `data` is voxel-major: `data[i * contrasts.len() + n]`.
    pub fn new(grid: VolumeGrid, data: Vec<f64>, contrasts: Vec<Contrast>, log_domain: bool) -> Result<Self> {
        let n = contrasts.len();
        if n == 0 {
            return Err(Error::InvalidInput("image needs at least one contrast".into()));
        }
        if data.len() != grid.n_voxels() * n {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match {} voxels x {} contrasts",
                data.len(),
                grid.n_voxels(),
                n
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: pos / n, channel: pos % n });
        }
        Ok(Self { grid, data, contrasts, log_domain })
    }

    /// Assemble from one array per contrast.
    pub fn from_channels(grid: VolumeGrid, channels: Vec<Vec<f64>>, contrasts: Vec<Contrast>, log_domain: bool) -> Result<Self> {
        if channels.len() != contrasts.len() {
            return Err(Error::InvalidInput("channel count does not match contrast tags".into()));
        }
        let n = channels.len();
        let nv = grid.n_voxels();
        if channels.iter().any(|c| c.len() != nv) {
            return Err(Error::InvalidInput("channel length does not match grid".into()));
        }
        let mut data = vec![0.0; nv * n];
        for (c, ch) in channels.iter().enumerate() {
            for (i, &v) in ch.iter().enumerate() {
                data[i * n + c] = v;
            }
        }
        Self::new(grid, data, contrasts, log_domain)
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.n_voxels()
    }

    pub fn n_contrasts(&self) -> usize {
        self.contrasts.len()
    }

    pub fn contrasts(&self) -> &[Contrast] {
        &self.contrasts
    }

    pub fn log_domain(&self) -> bool {
        self.log_domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn voxel(&self, i: usize) -> &[f64] {
        let n = self.contrasts.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        let n = self.contrasts.len();
        self.data.iter().skip(c).step_by(n).copied().collect()
    }
}

/// Natural log of every intensity, after clamping to `floor`.
pub fn log_transform(raw: &MultiContrastImage, floor: f64) -> Result<MultiContrastImage> {
    if raw.log_domain {
        return Err(Error::InvalidInput("image is already log-transformed".into()));
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidInput(format!("log floor must be positive, got {floor}")));
    }
    let n = raw.n_contrasts();
    let mut data = Vec::with_capacity(raw.data.len());
    for (pos, &v) in raw.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: pos / n, channel: pos % n });
        }
        data.push(v.max(floor).ln());
    }
    Ok(MultiContrastImage { grid: raw.grid.clone(), data, contrasts: raw.contrasts.clone(), log_domain: true })
}

/// Structure labels, 1-based (`1..=K`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: VolumeGrid,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(grid: VolumeGrid, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != grid.n_voxels() {
            return Err(Error::InvalidInput("label count does not match grid".into()));
        }
        if let Some(i) = labels.iter().position(|&l| l == 0) {
            return Err(Error::InvalidInput(format!("label 0 at voxel {i}; labels are 1-based")));
        }
        Ok(Self { grid, labels })
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(1)
    }

    pub fn check_range(&self, k: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize > k) {
            Some(i) => Err(Error::InvalidInput(format!(
                "label {} at voxel {i} exceeds K={k}",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionMask {
    grid: VolumeGrid,
    mask: Vec<bool>,
}

impl LesionMask {
    pub fn new(grid: VolumeGrid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.n_voxels() {
            return Err(Error::InvalidInput("mask length does not match grid".into()));
        }
        Ok(Self { grid, mask })
    }

    pub fn empty(grid: VolumeGrid) -> Self {
        let n = grid.n_voxels();
        Self { grid, mask: vec![false; n] }
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn to_probability(&self) -> ProbabilityMap {
        ProbabilityMap {
            grid: self.grid.clone(),
            probs: self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    grid: VolumeGrid,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(grid: VolumeGrid, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != grid.n_voxels() {
            return Err(Error::InvalidInput("probability count does not match grid".into()));
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(format!(
                "probability {} at voxel {i} outside [0,1]",
                probs[i]
            )));
        }
        Ok(Self { grid, probs })
    }

    pub fn constant(grid: VolumeGrid, value: f64) -> Self {
        let n = grid.n_voxels();
        Self { grid, probs: vec![value.clamp(0.0, 1.0); n] }
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Binarize with a strict `> threshold` rule.
    pub fn threshold(&self, threshold: f64) -> LesionMask {
        LesionMask { grid: self.grid.clone(), mask: self.probs.iter().map(|&p| p > threshold).collect() }
    }
}
