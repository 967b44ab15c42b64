//! On-disk preprocessing cache: one directory per case holding the resampled
//! image, its vessel-like twin, the mask (all NIfTI) and `patches.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::aha::{aha_detailed, AhaParams};
use super::patches::{classify, crop, grid_positions, normalize_intensity, Patch, PatchGroup};
use super::resample::{resample_to_spacing_with, MaskInterpolation, DEFAULT_SPACING_MM};
use crate::error::{invalid, Error, Result};
use crate::volume::{
    load_mask, load_volume, mask_bounding_box, save_mask, save_volume, AnnotationExtent, CaseRecord, DatasetManifest,
    LabelMask, Volume,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub spacing: f64,
    pub patch: usize,
    pub stride: usize,
    pub mask_interpolation: MaskInterpolation,
    pub aha: AhaParams,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            spacing: DEFAULT_SPACING_MM,
            patch: 32,
            stride: 16,
            mask_interpolation: MaskInterpolation::Nearest,
            aha: AhaParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    pub origin: [usize; 3],
    pub group: PatchGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub case_id: String,
    pub patch_size: usize,
    pub stride: usize,
    pub spacing: [f64; 3],
    pub extent: AnnotationExtent,
    pub aha_cutoff: f64,
    pub entries: Vec<PatchIndexEntry>,
}

impl PatchIndex {
    pub fn of_group(&self, group: PatchGroup) -> impl Iterator<Item = &PatchIndexEntry> {
        self.entries.iter().filter(move |e| e.group == group)
    }
}

/// A case ready for training: network-scale image, vessel-like twin, mask,
/// and the grouped patch grid.
#[derive(Clone, Debug)]
pub struct CaseCache {
    /// Resampled intensities as stored.
    pub image: Volume,
    /// `image` min-max scaled to `[0, 1]`.
    pub input: Volume,
    pub vessel_like: Volume,
    pub mask: LabelMask,
    pub full_mask: Option<LabelMask>,
    pub index: PatchIndex,
}

const IMAGE: &str = "image.nii.gz";
const VESSEL_LIKE: &str = "vessel_like.nii.gz";
const MASK: &str = "mask.nii.gz";
const FULL_MASK: &str = "full_mask.nii.gz";
const INDEX: &str = "patches.json";

impl CaseCache {
    /// Build from in-memory data.
    pub fn build(
        case_id: &str,
        vol: &Volume,
        mask: &LabelMask,
        full_mask: Option<&LabelMask>,
        extent: Option<AnnotationExtent>,
        cfg: &PreprocessConfig,
    ) -> Result<CaseCache> {
        let target = [cfg.spacing; 3];
        let src_spacing = vol.spacing();
        let (image, mask_r) = resample_to_spacing_with(vol, Some(mask), target, cfg.mask_interpolation)?;
        let mask_r = mask_r.expect("mask passed");
        let full_r = match full_mask {
            Some(f) => resample_to_spacing_with(vol, Some(f), target, cfg.mask_interpolation)?.1,
            None => None,
        };
        let shape = image.shape();
        let extent = match extent {
            Some(e) => {
                let scale = [0, 1, 2].map(|a| src_spacing[a] / cfg.spacing);
                let min = [0, 1, 2].map(|a| ((e.min[a] as f64 * scale[a]).floor() as usize).min(shape[a] - 1));
                let max = [0, 1, 2].map(|a| ((e.max[a] as f64 * scale[a]).ceil() as usize).clamp(min[a] + 1, shape[a]));
                AnnotationExtent::new(min, max)?
            }
            None => mask_bounding_box(&mask_r)?,
        };
        let aha = aha_detailed(&image, &cfg.aha)?;
        let input = normalize_intensity(&image)?;
        let index = build_index(case_id, &extent, shape, cfg, aha.cutoff, image.spacing())?;
        Ok(CaseCache {
            image,
            input,
            vessel_like: aha.volume,
            mask: mask_r,
            full_mask: full_r,
            index,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_volume(&self.image, dir.join(IMAGE))?;
        save_volume(&self.vessel_like, dir.join(VESSEL_LIKE))?;
        save_mask(&self.mask, dir.join(MASK))?;
        if let Some(f) = &self.full_mask {
            save_mask(f, dir.join(FULL_MASK))?;
        }
        let p = dir.join(INDEX);
        std::fs::write(&p, serde_json::to_string_pretty(&self.index)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<CaseCache> {
        let p = dir.join(INDEX);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let index: PatchIndex = serde_json::from_str(&text)?;
        let image = load_volume(dir.join(IMAGE))?;
        let vessel_like = load_volume(dir.join(VESSEL_LIKE))?;
        let mask = load_mask(dir.join(MASK))?;
        let full = dir.join(FULL_MASK);
        let full_mask = if full.exists() { Some(load_mask(full)?) } else { None };
        let input = normalize_intensity(&image)?;
        Ok(CaseCache {
            image,
            input,
            vessel_like,
            mask,
            full_mask,
            index,
        })
    }

    /// Cached case if the record points at one, otherwise built on the fly.
    pub fn for_case(manifest: &DatasetManifest, case: &CaseRecord, cfg: &PreprocessConfig) -> Result<CaseCache> {
        if let Some(dir) = &case.cache {
            let cache = CaseCache::load(&manifest.resolve(dir))?;
            if cache.index.patch_size != cfg.patch || cache.index.stride != cfg.stride {
                return cache.regrid(cfg);
            }
            return Ok(cache);
        }
        let vol = load_volume(manifest.resolve(&case.volume))?;
        let mask = load_mask(manifest.resolve(&case.mask))?;
        let full = case.full_mask.as_ref().map(|p| load_mask(manifest.resolve(p))).transpose()?;
        CaseCache::build(&case.id, &vol, &mask, full.as_ref(), case.extent, cfg)
    }

    /// Same volumes, different patch grid.
    pub fn regrid(mut self, cfg: &PreprocessConfig) -> Result<CaseCache> {
        let idx = &self.index;
        self.index = build_index(&idx.case_id, &idx.extent, self.image.shape(), cfg, idx.aha_cutoff, idx.spacing)?;
        Ok(self)
    }

    pub fn patch(&self, entry: &PatchIndexEntry) -> Patch {
        crop(&self.input, &self.vessel_like, &self.mask, entry.origin, self.index.patch_size, entry.group)
    }

    pub fn labeled(&self) -> Vec<PatchIndexEntry> {
        self.index.of_group(PatchGroup::Labeled).copied().collect()
    }

    pub fn unlabeled(&self) -> Vec<PatchIndexEntry> {
        self.index.of_group(PatchGroup::Unlabeled).copied().collect()
    }
}

fn build_index(
    case_id: &str,
    extent: &AnnotationExtent,
    shape: [usize; 3],
    cfg: &PreprocessConfig,
    cutoff: f64,
    spacing: [f64; 3],
) -> Result<PatchIndex> {
    if cfg.patch == 0 || cfg.stride == 0 || cfg.stride > cfg.patch {
        return Err(invalid(format!("need 0 < stride <= patch, got {} / {}", cfg.stride, cfg.patch)));
    }
    if shape.iter().any(|&n| n < cfg.patch) {
        return Err(invalid(format!("patch {} exceeds volume {shape:?}", cfg.patch)));
    }
    extent.check_within(shape)?;
    if extent.size().iter().any(|&n| n < cfg.patch) {
        log::warn!("case {case_id}: extent {:?} smaller than patch {}; no labeled patches", extent.size(), cfg.patch);
    }
    let entries = grid_positions(shape, cfg.patch, cfg.stride)
        .into_iter()
        .filter_map(|origin| classify(origin, cfg.patch, extent).map(|group| PatchIndexEntry { origin, group }))
        .collect();
    Ok(PatchIndex {
        case_id: case_id.to_string(),
        patch_size: cfg.patch,
        stride: cfg.stride,
        spacing,
        extent: *extent,
        aha_cutoff: cutoff,
        entries,
    })
}

/// Preprocess one manifest case into `out_dir/<case id>` and return the
/// record pointing at the cache.
pub fn preprocess_case(
    manifest: &DatasetManifest,
    case: &CaseRecord,
    cfg: &PreprocessConfig,
    out_dir: &Path,
) -> Result<CaseRecord> {
    let mut case = case.clone();
    case.cache = None;
    let cache = CaseCache::for_case(manifest, &case, cfg)?;
    let dir = out_dir.join(&case.id);
    cache.save(&dir)?;
    let rel = PathBuf::from(&case.id);
    Ok(CaseRecord {
        volume: rel.join(IMAGE),
        mask: rel.join(MASK),
        full_mask: cache.full_mask.as_ref().map(|_| rel.join(FULL_MASK)),
        extent: Some(cache.index.extent),
        cache: Some(rel),
        ..case
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn build_save_load() {
        let n = 32;
        let vol = Volume::new(
            Array3::from_shape_fn((n, n, n), |(i, j, k)| if i < 10 { 20.0 } else { 80.0 + ((j * k) % 7) as f32 }),
            [0.35; 3],
        )
        .unwrap();
        let mask = LabelMask::new(Array3::from_shape_fn((n, n, n), |(i, j, _)| u8::from(i < 20 && j < 20)), [0.35; 3]).unwrap();
        let cfg = PreprocessConfig { patch: 8, stride: 4, ..Default::default() };
        let cache = CaseCache::build("c0", &vol, &mask, None, None, &cfg).unwrap();
        assert_eq!(cache.index.extent, AnnotationExtent::new([0, 0, 0], [20, 20, 32]).unwrap());
        assert!(!cache.labeled().is_empty() && !cache.unlabeled().is_empty());
        let dir = tempfile::tempdir().unwrap();
        cache.save(dir.path()).unwrap();
        let back = CaseCache::load(dir.path()).unwrap();
        assert_eq!(back.index, cache.index);
        let e = cache.labeled()[3];
        assert_eq!(back.patch(&e), cache.patch(&e));
        let re = back.regrid(&PreprocessConfig { patch: 16, stride: 8, ..Default::default() }).unwrap();
        assert_eq!(re.index.patch_size, 16);
    }
}
