use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par::{self, ExecPolicy};
use crate::volume::{AnnotationExtent, LabelMask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchGroup {
    Labeled,
    Unlabeled,
}

/// A cubic sub-volume and its vessel-like twin. Labeled patches carry the
/// mask crop, unlabeled patches never do.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Array3<f32>,
    pub vessel_like: Array3<f32>,
    pub mask: Option<Array3<u8>>,
    pub grid_origin: [usize; 3],
    pub group: PatchGroup,
}

impl Patch {
    pub fn new(
        image: Array3<f32>,
        vessel_like: Array3<f32>,
        mask: Option<Array3<u8>>,
        grid_origin: [usize; 3],
    ) -> Result<Self> {
        if image.shape() != vessel_like.shape() {
            return Err(Error::shape(image.shape(), vessel_like.shape()));
        }
        if let Some(m) = &mask {
            if m.shape() != image.shape() {
                return Err(Error::shape(image.shape(), m.shape()));
            }
        }
        if vessel_like.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("vessel-like values must lie in [0, 1]"));
        }
        let group = if mask.is_some() {
            PatchGroup::Labeled
        } else {
            PatchGroup::Unlabeled
        };
        Ok(Self {
            image,
            vessel_like,
            mask,
            grid_origin,
            group,
        })
    }

    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn extent(&self) -> AnnotationExtent {
        let p = self.image.shape();
        AnnotationExtent {
            min: self.grid_origin,
            max: [0, 1, 2].map(|a| self.grid_origin[a] + p[a]),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PatchSet {
    pub labeled: Vec<Patch>,
    pub unlabeled: Vec<Patch>,
    /// Grid positions visited before grouping.
    pub positions: usize,
    pub warnings: Vec<String>,
}

/// Start offsets `0, stride, 2*stride, ...` with `start + patch <= n`.
pub fn grid_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch > n || stride == 0 {
        return Vec::new();
    }
    (0..=(n - patch)).step_by(stride).collect()
}

/// All grid origins, in C order.
pub fn grid_positions(shape: [usize; 3], patch: usize, stride: usize) -> Vec<[usize; 3]> {
    let starts: [Vec<usize>; 3] = [0, 1, 2].map(|a| grid_starts(shape[a], patch, stride));
    let mut out = Vec::with_capacity(starts.iter().map(Vec::len).product());
    for &i in &starts[0] {
        for &j in &starts[1] {
            for &k in &starts[2] {
                out.push([i, j, k]);
            }
        }
    }
    out
}

/// Min-max normalize to `[0, 1]` (the raw stream's network input scale).
pub fn normalize_intensity(vol: &Volume) -> Result<Volume> {
    let (lo, hi) = vol.min_max();
    if hi > lo {
        let scale = 1.0 / (hi - lo);
        vol.map(|v| (v - lo) * scale)
    } else {
        vol.map(|_| 0.0)
    }
}

/// Sliding-grid patches grouped against the annotation extent: inside it ->
/// labeled, disjoint from it -> unlabeled, straddling -> discarded.
pub fn extract_patches(
    vol: &Volume,
    vessel_like: &Volume,
    mask: &LabelMask,
    extent: &AnnotationExtent,
    patch_size: usize,
    stride: usize,
) -> Result<PatchSet> {
    extract_patches_with(ExecPolicy::default(), vol, vessel_like, mask, extent, patch_size, stride)
}

pub fn extract_patches_with(
    policy: ExecPolicy,
    vol: &Volume,
    vessel_like: &Volume,
    mask: &LabelMask,
    extent: &AnnotationExtent,
    patch_size: usize,
    stride: usize,
) -> Result<PatchSet> {
    let shape = vol.shape();
    if vessel_like.shape() != shape {
        return Err(Error::shape(&shape, &vessel_like.shape()));
    }
    if mask.shape() != shape {
        return Err(Error::shape(&shape, &mask.shape()));
    }
    if patch_size == 0 || stride == 0 || stride > patch_size {
        return Err(invalid(format!("need 0 < stride <= patch, got stride {stride} patch {patch_size}")));
    }
    if shape.iter().any(|&n| n < patch_size) {
        return Err(invalid(format!("patch {patch_size} exceeds volume {shape:?}")));
    }
    extent.check_within(shape)?;

    let mut warnings = Vec::new();
    if extent.size().iter().any(|&n| n < patch_size) {
        let w = format!("extent {:?} smaller than patch {patch_size}: no labeled patches", extent.size());
        log::warn!("{w}");
        warnings.push(w);
    }
    let positions = grid_positions(shape, patch_size, stride);

    let patches = par::map_range(policy, positions.len(), |n| {
        let origin = positions[n];
        let group = classify(origin, patch_size, extent)?;
        Some(crop(vol, vessel_like, mask, origin, patch_size, group))
    });
    let mut set = PatchSet {
        positions: positions.len(),
        warnings,
        ..Default::default()
    };
    for p in patches.into_iter().flatten() {
        match p.group {
            PatchGroup::Labeled => set.labeled.push(p),
            PatchGroup::Unlabeled => set.unlabeled.push(p),
        }
    }
    Ok(set)
}

pub(crate) fn classify(origin: [usize; 3], patch: usize, extent: &AnnotationExtent) -> Option<PatchGroup> {
    let bx = AnnotationExtent {
        min: origin,
        max: origin.map(|o| o + patch),
    };
    if bx.inside(extent) {
        Some(PatchGroup::Labeled)
    } else if !bx.intersects(extent) {
        Some(PatchGroup::Unlabeled)
    } else {
        None
    }
}

pub(crate) fn crop(
    vol: &Volume,
    vessel_like: &Volume,
    mask: &LabelMask,
    origin: [usize; 3],
    p: usize,
    group: PatchGroup,
) -> Patch {
    let sl = s![origin[0]..origin[0] + p, origin[1]..origin[1] + p, origin[2]..origin[2] + p];
    Patch {
        image: vol.data().slice(sl).to_owned(),
        vessel_like: vessel_like.data().slice(sl).to_owned(),
        mask: (group == PatchGroup::Labeled).then(|| mask.data().slice(sl).to_owned()),
        grid_origin: origin,
        group,
    }
}
