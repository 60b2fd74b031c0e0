//! Core voxel-grid types: scalar volumes, integer label volumes and
//! per-class mask tensors.
//!
//! All grids are stored flat with the x index fastest, i.e. the linear
//! index of voxel `(x, y, z)` is `x + nx * (y + ny * z)`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};

/// Background plus the three anatomical substructures.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_TL: u8 = 1;
pub const LABEL_FL: u8 = 2;
pub const LABEL_FLT: u8 = 3;
pub const MAX_LABEL: u8 = 3;

/// Default segmentation classes, in channel order.
pub const DEFAULT_CLASSES: [&str; 3] = ["ALL", "TL", "FL"];

/// Grid extents `(nx, ny, nz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn cubic(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_cubic(&self) -> bool {
        self.nx == self.ny && self.ny == self.nz
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        x + self.nx * (y + self.ny * z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(SegError::DimMismatch(format!(
                "dims components must be >= 1, got ({}, {}, {})",
                self.nx, self.ny, self.nz
            )));
        }
        Ok(())
    }
}

/// A 3D scalar intensity grid.
///
/// Values are raw scanner units before preprocessing and dimensionless
/// in `[0, 1]` after it. Stored as `f32`, matching the on-disk payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub data: Vec<f32>,
    /// Optional voxel spacing in millimetres.
    pub spacing: Option<[f32; 3]>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(SegError::DimMismatch(format!(
                "volume data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                dims.len()
            )));
        }
        Ok(Volume {
            dims,
            data,
            spacing: None,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.len()],
            spacing: None,
        }
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = Some(spacing);
        self
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, z: usize) -> &mut f32 {
        &mut self.data[self.dims.index(x, y, z)]
    }

    pub fn cubic_side(&self) -> Result<usize> {
        if !self.dims.is_cubic() {
            return Err(SegError::NotCubic(self.dims.nx, self.dims.ny, self.dims.nz));
        }
        Ok(self.dims.nx)
    }
}

/// Integer labels over a grid, one of `{0: background, 1: TL, 2: FL, 3: FLT}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        if labels.len() != dims.len() {
            return Err(SegError::DimMismatch(format!(
                "label data length {} does not match dims {:?}",
                labels.len(),
                dims
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l > MAX_LABEL {
                return Err(SegError::InvalidLabel {
                    label: l as i64,
                    index: i,
                });
            }
        }
        Ok(LabelVolume { dims, labels })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }
}

/// Per-class soft or binary masks over a grid, channel-major:
/// channel `c` occupies `values[c * dims.len() .. (c + 1) * dims.len()]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub classes: Vec<String>,
    pub dims: Dims,
    /// Per-voxel per-class values in `[0, 1]`; exactly `{0, 1}` when `binary`.
    pub values: Vec<f64>,
    pub binary: bool,
}

impl MaskTensor {
    pub fn new(classes: Vec<String>, dims: Dims, values: Vec<f64>, binary: bool) -> Result<Self> {
        dims.validate()?;
        if classes.is_empty() {
            return Err(SegError::InvalidArgument(
                "mask tensor needs at least one class".into(),
            ));
        }
        if values.len() != classes.len() * dims.len() {
            return Err(SegError::DimMismatch(format!(
                "mask values length {} does not match {} classes x {} voxels",
                values.len(),
                classes.len(),
                dims.len()
            )));
        }
        for &v in &values {
            if !(0.0..=1.0).contains(&v) {
                return Err(SegError::InvalidArgument(format!(
                    "mask value {v} outside [0, 1]"
                )));
            }
            if binary && v != 0.0 && v != 1.0 {
                return Err(SegError::InvalidArgument(format!(
                    "mask flagged binary but contains {v}"
                )));
            }
        }
        Ok(MaskTensor {
            classes,
            dims,
            values,
            binary,
        })
    }

    pub fn zeros(classes: Vec<String>, dims: Dims) -> Self {
        let n = classes.len() * dims.len();
        MaskTensor {
            classes,
            dims,
            values: vec![0.0; n],
            binary: true,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn voxels(&self) -> usize {
        self.dims.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.values[c * n..(c + 1) * n]
    }

    /// Strict threshold rule: value > threshold maps to 1, else 0.
    pub fn binarize(&self, threshold: f64) -> MaskTensor {
        let values = self
            .values
            .iter()
            .map(|&v| if v > threshold { 1.0 } else { 0.0 })
            .collect();
        MaskTensor {
            classes: self.classes.clone(),
            dims: self.dims,
            values,
            binary: true,
        }
    }

    pub fn same_layout(&self, other: &MaskTensor) -> Result<()> {
        if self.dims != other.dims || self.classes != other.classes {
            return Err(SegError::DimMismatch(format!(
                "mask layout mismatch: {:?}/{:?} vs {:?}/{:?}",
                self.classes, self.dims, other.classes, other.dims
            )));
        }
        Ok(())
    }
}

/// Mapping from class name to the set of integer labels it covers.
pub type ClassSpec = Vec<(String, Vec<u8>)>;

/// The paper's final class set: ALL is the union of the three substructures.
pub fn default_class_spec() -> ClassSpec {
    vec![
        ("ALL".to_string(), vec![LABEL_TL, LABEL_FL, LABEL_FLT]),
        ("TL".to_string(), vec![LABEL_TL]),
        ("FL".to_string(), vec![LABEL_FL]),
    ]
}

/// Expands integer labels into binary per-class channels.
///
/// Channel `c` is 1 exactly where the voxel label is in `class_spec[c]`.
pub fn labels_to_masks(lv: &LabelVolume, class_spec: &ClassSpec) -> Result<MaskTensor> {
    for (i, &l) in lv.labels.iter().enumerate() {
        if l > MAX_LABEL {
            return Err(SegError::InvalidLabel {
                label: l as i64,
                index: i,
            });
        }
    }
    let n = lv.dims.len();
    let classes: Vec<String> = class_spec.iter().map(|(name, _)| name.clone()).collect();
    let mut values = vec![0.0f64; classes.len() * n];
    for (c, (_, labels)) in class_spec.iter().enumerate() {
        let member: Vec<bool> = (0..=MAX_LABEL).map(|l| labels.contains(&l)).collect();
        let channel = &mut values[c * n..(c + 1) * n];
        for (out, &l) in channel.iter_mut().zip(lv.labels.iter()) {
            if member[l as usize] {
                *out = 1.0;
            }
        }
    }
    MaskTensor::new(classes, lv.dims, values, true)
}

/// A labeled training sample.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: String,
    pub volume: Volume,
    pub mask: MaskTensor,
}

/// An unlabeled training sample.
#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    pub id: String,
    pub volume: Volume,
}

/// Labeled and unlabeled pools used by one training run.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.labeled {
            if !seen.insert(s.id.clone()) {
                return Err(SegError::InvalidArgument(format!(
                    "duplicate sample id {:?} in labeled pool",
                    s.id
                )));
            }
        }
        for s in &self.unlabeled {
            if !seen.insert(s.id.clone()) {
                return Err(SegError::InvalidArgument(format!(
                    "sample id {:?} appears in both labeled and unlabeled pools",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

/// Optional sidecar metadata describing the label encoding of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSidecar {
    pub labels: BTreeMap<String, String>,
}

impl Default for LabelSidecar {
    fn default() -> Self {
        let mut labels = BTreeMap::new();
        labels.insert("1".to_string(), "TL".to_string());
        labels.insert("2".to_string(), "FL".to_string());
        labels.insert("3".to_string(), "FLT".to_string());
        LabelSidecar { labels }
    }
}
