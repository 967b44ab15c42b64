//! Volumes, label masks, annotation extents and their file formats.

mod manifest;
mod nifti;
mod raw;

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use manifest::{make_folds, patient_assignment, split_dataset, CaseRecord, DatasetManifest, Splits};

pub type Vec3 = [f64; 3];

/// A 3D scalar intensity grid with physical spacing (mm/voxel).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: Vec3,
    origin: Vec3,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: Vec3) -> Result<Self> {
        Self::with_origin(data, spacing, [0.0; 3])
    }

    pub fn with_origin(data: Array3<f32>, spacing: Vec3, origin: Vec3) -> Result<Self> {
        check_spacing(spacing)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        if data.is_empty() {
            return Err(invalid("empty volume"));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing,
            origin,
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Same geometry, new intensities.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Volume> {
        Volume::with_origin(self.data.mapv(f), self.spacing, self.origin)
    }
}

/// Binary segmentation on the grid of a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    data: Array3<u8>,
    spacing: Vec3,
    origin: Vec3,
}

impl LabelMask {
    /// Any nonzero value is foreground.
    pub fn new(data: Array3<u8>, spacing: Vec3) -> Result<Self> {
        Self::with_origin(data, spacing, [0.0; 3])
    }

    pub fn with_origin(data: Array3<u8>, spacing: Vec3, origin: Vec3) -> Result<Self> {
        check_spacing(spacing)?;
        let data = data.mapv(|v| u8::from(v != 0));
        Ok(Self {
            data,
            spacing,
            origin,
        })
    }

    pub fn zeros(shape: [usize; 3], spacing: Vec3) -> Result<Self> {
        Self::new(Array3::zeros(shape), spacing)
    }

    /// Threshold a volume: voxels with value > `level` are foreground.
    pub fn from_volume(vol: &Volume, level: f32) -> LabelMask {
        LabelMask {
            data: vol.data.mapv(|v| u8::from(v > level)),
            spacing: vol.spacing,
            origin: vol.origin,
        }
    }

    pub fn like(vol: &Volume, data: Array3<u8>) -> Result<LabelMask> {
        let mask = LabelMask::with_origin(data, vol.spacing, vol.origin)?;
        if mask.shape() != vol.shape() {
            return Err(Error::shape(&vol.shape(), &mask.shape()));
        }
        Ok(mask)
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            data: self.data.mapv(f32::from),
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    /// Voxelwise `self AND NOT other`.
    pub fn minus(&self, other: &LabelMask) -> Result<LabelMask> {
        if self.shape() != other.shape() {
            return Err(Error::shape(&self.shape(), &other.shape()));
        }
        let mut out = self.clone();
        Zip::from(&mut out.data)
            .and(&other.data)
            .for_each(|a, &b| *a = u8::from(*a != 0 && b == 0));
        Ok(out)
    }

    /// True if every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &LabelMask) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| a == 0 || b != 0)
    }

    /// Copy restricted to `extent`, with origin shifted accordingly.
    pub fn crop(&self, extent: &AnnotationExtent) -> LabelMask {
        let data = self.data.slice(extent.slice()).to_owned();
        LabelMask {
            data,
            spacing: self.spacing,
            origin: shifted_origin(self.origin, self.spacing, extent.min),
        }
    }

    /// One step of 6-connected binary dilation.
    pub fn dilate6(&self) -> LabelMask {
        let [d, h, w] = self.shape();
        let mut out = self.data.clone();
        for ((i, j, k), &v) in self.data.indexed_iter() {
            if v == 0 {
                continue;
            }
            for (di, dj, dk) in NEIGHBORS6 {
                let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
                if ni >= 0
                    && nj >= 0
                    && nk >= 0
                    && (ni as usize) < d
                    && (nj as usize) < h
                    && (nk as usize) < w
                {
                    out[[ni as usize, nj as usize, nk as usize]] = 1;
                }
            }
        }
        LabelMask {
            data: out,
            spacing: self.spacing,
            origin: self.origin,
        }
    }
}

const NEIGHBORS6: [(isize, isize, isize); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

/// Number of 6-connected foreground components.
pub fn count_components(mask: &Array3<u8>) -> usize {
    let shape = mask.shape();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let mut seen = Array3::<bool>::from_elem((d, h, w), false);
    let mut queue = VecDeque::new();
    let mut count = 0;
    for ((i, j, k), &v) in mask.indexed_iter() {
        if v == 0 || seen[[i, j, k]] {
            continue;
        }
        count += 1;
        seen[[i, j, k]] = true;
        queue.push_back((i, j, k));
        while let Some((a, b, c)) = queue.pop_front() {
            for (di, dj, dk) in NEIGHBORS6 {
                let (ni, nj, nk) = (a as isize + di, b as isize + dj, c as isize + dk);
                if ni < 0 || nj < 0 || nk < 0 {
                    continue;
                }
                let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                if ni < d && nj < h && nk < w && mask[[ni, nj, nk]] != 0 && !seen[[ni, nj, nk]] {
                    seen[[ni, nj, nk]] = true;
                    queue.push_back((ni, nj, nk));
                }
            }
        }
    }
    count
}

/// Voxel-index box, `min` inclusive and `max` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationExtent {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl AnnotationExtent {
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| min[a] >= max[a]) {
            return Err(invalid(format!("degenerate extent {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn full(shape: [usize; 3]) -> Self {
        Self {
            min: [0; 3],
            max: shape,
        }
    }

    pub fn check_within(&self, shape: [usize; 3]) -> Result<()> {
        if (0..3).any(|a| self.max[a] > shape[a] || self.min[a] >= self.max[a]) {
            return Err(invalid(format!(
                "extent {:?}..{:?} outside volume {shape:?}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn size(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    pub fn voxel_count(&self) -> usize {
        self.size().iter().product()
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        (0..3).all(|a| idx[a] >= self.min[a] && idx[a] < self.max[a])
    }

    /// `self ⊆ other`.
    pub fn inside(&self, other: &AnnotationExtent) -> bool {
        (0..3).all(|a| self.min[a] >= other.min[a] && self.max[a] <= other.max[a])
    }

    pub fn intersects(&self, other: &AnnotationExtent) -> bool {
        (0..3).all(|a| self.min[a] < other.max[a] && other.min[a] < self.max[a])
    }

    /// Grow by `r` voxels on every side, clamped to `shape`.
    pub fn dilate(&self, r: usize, shape: [usize; 3]) -> AnnotationExtent {
        AnnotationExtent {
            min: [0, 1, 2].map(|a| self.min[a].saturating_sub(r)),
            max: [0, 1, 2].map(|a| (self.max[a] + r).min(shape[a])),
        }
    }

    pub(crate) fn slice(&self) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 3], ndarray::Ix3, ndarray::Ix3> {
        ndarray::s![
            self.min[0]..self.max[0],
            self.min[1]..self.max[1],
            self.min[2]..self.max[2]
        ]
    }
}

/// Tightest box containing every foreground voxel.
pub fn mask_bounding_box(mask: &LabelMask) -> Result<AnnotationExtent> {
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for ((i, j, k), &v) in mask.data.indexed_iter() {
        if v == 0 {
            continue;
        }
        any = true;
        for (a, x) in [i, j, k].into_iter().enumerate() {
            min[a] = min[a].min(x);
            max[a] = max[a].max(x + 1);
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(AnnotationExtent { min, max })
}

pub(crate) fn shifted_origin(origin: Vec3, spacing: Vec3, by: [usize; 3]) -> Vec3 {
    [0, 1, 2].map(|a| origin[a] + by[a] as f64 * spacing[a])
}

fn check_spacing(spacing: Vec3) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

/// Load a volume from NIfTI-1 (`.nii`, `.nii.gz`) or a raw fixture
/// (`.raw` with a `.json` sidecar).
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match format_of(path)? {
        FileFormat::Nifti => nifti::read(path),
        FileFormat::Raw => raw::read(path),
    }
}

/// Load a mask; any nonzero voxel is foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let vol = load_volume(path)?;
    LabelMask::with_origin(vol.data.mapv(|v| u8::from(v != 0.0)), vol.spacing, vol.origin)
}

/// Save as float32 NIfTI or raw fixture, chosen by extension.
pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format_of(path)? {
        FileFormat::Nifti => nifti::write_f32(vol, path),
        FileFormat::Raw => raw::write(vol, path),
    }
}

/// Save as uint8 NIfTI or raw fixture, chosen by extension.
pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format_of(path)? {
        FileFormat::Nifti => nifti::write_u8(mask, path),
        FileFormat::Raw => raw::write(&mask.to_volume(), path),
    }
}

enum FileFormat {
    Nifti,
    Raw,
}

fn format_of(path: &Path) -> Result<FileFormat> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(FileFormat::Nifti)
    } else if name.ends_with(".raw") || name.ends_with(".json") {
        Ok(FileFormat::Raw)
    } else {
        Err(Error::Format {
            path: path.into(),
            reason: "expected .nii, .nii.gz, or .raw/.json fixture".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_voxel_bbox() {
        let mut m = Array3::<u8>::zeros((8, 8, 8));
        m[[2, 3, 4]] = 1;
        let bb = mask_bounding_box(&LabelMask::new(m, [1.0; 3]).unwrap()).unwrap();
        assert_eq!(bb.min, [2, 3, 4]);
        assert_eq!(bb.max, [3, 4, 5]);
    }

    #[test]
    fn full_bbox() {
        let m = LabelMask::new(Array3::from_elem((8, 8, 8), 1), [1.0; 3]).unwrap();
        assert_eq!(mask_bounding_box(&m).unwrap(), AnnotationExtent::full([8, 8, 8]));
    }

    #[test]
    fn empty_bbox_errors() {
        let m = LabelMask::zeros([4, 4, 4], [1.0; 3]).unwrap();
        assert!(matches!(mask_bounding_box(&m), Err(Error::EmptyMask)));
    }

    #[test]
    fn nonbinary_values_are_foreground() {
        let mut d = Array3::<u8>::zeros((2, 2, 2));
        d[[0, 0, 0]] = 255;
        let m = LabelMask::new(d, [1.0; 3]).unwrap();
        assert_eq!(m.data()[[0, 0, 0]], 1);
    }

    #[test]
    fn rejects_bad_spacing_and_nan() {
        assert!(Volume::new(Array3::zeros((2, 2, 2)), [1.0, 0.0, 1.0]).is_err());
        let mut d = Array3::<f32>::zeros((2, 2, 2));
        d[[1, 1, 1]] = f32::NAN;
        assert!(matches!(Volume::new(d, [1.0; 3]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn components() {
        let mut d = Array3::<u8>::zeros((5, 5, 5));
        d[[0, 0, 0]] = 1;
        d[[0, 0, 1]] = 1;
        d[[4, 4, 4]] = 1;
        d[[2, 2, 2]] = 1;
        d[[3, 3, 2]] = 1; // diagonal only: separate under 6-connectivity
        assert_eq!(count_components(&d), 4);
    }

    proptest! {
        #[test]
        fn bbox_matches_brute_force(
            n in 2usize..17,
            bits in proptest::collection::vec(0u8..20, 16 * 16 * 16),
        ) {
            let d = Array3::from_shape_fn((n, n, n), |(i, j, k)| u8::from(bits[(i * 16 + j) * 16 + k] == 0));
            let m = LabelMask::new(d.clone(), [1.0; 3]).unwrap();
            let fg: Vec<_> = d.indexed_iter().filter(|(_, &v)| v != 0).map(|(ix, _)| ix).collect();
            match mask_bounding_box(&m) {
                Err(_) => prop_assert!(fg.is_empty()),
                Ok(bb) => {
                    let lo = [
                        fg.iter().map(|p| p.0).min().unwrap(),
                        fg.iter().map(|p| p.1).min().unwrap(),
                        fg.iter().map(|p| p.2).min().unwrap(),
                    ];
                    let hi = [
                        fg.iter().map(|p| p.0).max().unwrap() + 1,
                        fg.iter().map(|p| p.1).max().unwrap() + 1,
                        fg.iter().map(|p| p.2).max().unwrap() + 1,
                    ];
                    prop_assert_eq!(bb.min, lo);
                    prop_assert_eq!(bb.max, hi);
                }
            }
        }
    }
}
