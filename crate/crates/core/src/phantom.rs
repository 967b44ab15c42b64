//! Synthetic vascular phantoms.
//!
//! A binary tree of capsules grows from a corner toward the far side of the
//! grid. Segments at or above the annotation radius form the partial label;
//! the thinner ones exist only in the full ground truth. Intensities come from
//! three Gaussian bands (background outside a spherical "brain", tissue inside,
//! vessel on the tree) plus additive noise.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par::{map_range, ExecPolicy};
use crate::rng::{Rng, SeedTree};
use crate::volume::{
    mask_bounding_box, save_mask, save_volume, AnnotationExtent, CaseRecord, DatasetManifest, LabelMask, Volume,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Edge length of the cubic grid, in voxels.
    pub size: usize,
    pub spacing_mm: f64,
    /// Branching levels below the trunk.
    pub depth: usize,
    pub trunk_radius_mm: f64,
    pub radius_decay: f64,
    /// Trunk length as a fraction of the grid edge.
    pub trunk_length_fraction: f64,
    pub length_decay: f64,
    /// Child deviation from the parent direction, degrees.
    pub branch_angle_deg: [f64; 2],
    /// Thin unbranched twigs leaving the trunk at evenly spaced points.
    pub trunk_twigs: usize,
    pub background: Band,
    pub tissue: Band,
    pub vessel: Band,
    /// Radius of the tissue sphere as a fraction of the grid edge.
    pub tissue_radius_fraction: f64,
    pub noise_std: f64,
    /// Segments with radius below this are left out of the partial label.
    pub annotation_radius_mm: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            spacing_mm: 0.35,
            depth: 3,
            trunk_radius_mm: 1.2,
            radius_decay: 0.7,
            trunk_length_fraction: 0.45,
            length_decay: 0.6,
            branch_angle_deg: [25.0, 50.0],
            trunk_twigs: 3,
            background: Band { mean: 20.0, std: 8.0 },
            tissue: Band { mean: 80.0, std: 8.0 },
            vessel: Band { mean: 160.0, std: 8.0 },
            tissue_radius_fraction: 0.47,
            noise_std: 2.0,
            annotation_radius_mm: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.size < 8 {
            return Err(invalid("phantom size must be >= 8"));
        }
        if !pos(self.spacing_mm) || !pos(self.trunk_radius_mm) || !pos(self.trunk_length_fraction) {
            return Err(invalid("phantom spacing, trunk radius and trunk length must be positive"));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay <= 1.0) || !(self.length_decay > 0.0 && self.length_decay <= 1.0) {
            return Err(invalid("decay factors must lie in (0, 1]"));
        }
        let [lo, hi] = self.branch_angle_deg;
        if !(0.0..=90.0).contains(&lo) || !(lo..=90.0).contains(&hi) {
            return Err(invalid(format!("branch angle range {lo}..{hi} must satisfy 0 <= lo <= hi <= 90")));
        }
        let bands = [self.background, self.tissue, self.vessel];
        if bands.iter().any(|b| !b.mean.is_finite() || !(b.std >= 0.0)) {
            return Err(invalid("intensity bands need finite means and nonnegative std"));
        }
        if !(self.background.mean < self.tissue.mean && self.tissue.mean < self.vessel.mean) {
            return Err(invalid("band means must be ordered background < tissue < vessel"));
        }
        if !(self.noise_std >= 0.0) || !(self.annotation_radius_mm >= 0.0) || !pos(self.tissue_radius_fraction) {
            return Err(invalid("noise, annotation radius and tissue radius must be nonnegative"));
        }
        Ok(())
    }
}

/// One tube of the tree, in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
    pub level: usize,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub full_mask: LabelMask,
    pub partial_mask: LabelMask,
    pub extent: AnnotationExtent,
    pub segments: Vec<Segment>,
    /// Some segment reached past the grid and was cut.
    pub clipped: bool,
}

impl Phantom {
    pub fn fine_mask(&self) -> LabelMask {
        self.full_mask.minus(&self.partial_mask).expect("same grid")
    }
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    a.map(|v| v * s)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / dot(a, a).sqrt())
}

fn unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        let n = dot(v, v);
        if n > 1e-6 && n <= 1.0 {
            return normalize(v);
        }
    }
}

fn tree(spec: &PhantomSpec, rng: &mut Rng) -> Vec<Segment> {
    let n = spec.size as f64;
    let s = spec.spacing_mm;
    let start = [0; 3].map(|_| (0.12 + rng.random_range(-0.04..0.04)) * n * s);
    let center = [(n - 1.0) * s / 2.0; 3];
    let toward = normalize(add(center, scale(start, -1.0)));
    let dir = normalize(add(toward, scale(unit_vector(rng), 0.15)));
    let len = spec.trunk_length_fraction * n * s;
    let mut out = Vec::new();
    grow(spec, rng, start, dir, len, spec.trunk_radius_mm, 0, &mut out);
    let tw = spec.trunk_twigs;
    for t in 1..=tw {
        let a = add(start, scale(dir, len * t as f64 / (tw + 1) as f64));
        let u = unit_vector(rng);
        let perp = normalize(add(u, scale(dir, -dot(u, dir))));
        let th = rng.random_range(60.0f64..=90.0).to_radians();
        let d = normalize(add(scale(dir, th.cos()), scale(perp, th.sin())));
        out.push(Segment {
            a,
            b: add(a, scale(d, len * spec.length_decay.powi(2))),
            radius: spec.trunk_radius_mm * spec.radius_decay.powi(2),
            level: 2,
        });
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn grow(
    spec: &PhantomSpec,
    rng: &mut Rng,
    a: [f64; 3],
    dir: [f64; 3],
    len: f64,
    radius: f64,
    level: usize,
    out: &mut Vec<Segment>,
) {
    let b = add(a, scale(dir, len));
    out.push(Segment { a, b, radius, level });
    if level == spec.depth {
        return;
    }
    let u = unit_vector(rng);
    let perp = normalize(add(u, scale(dir, -dot(u, dir))));
    let [lo, hi] = spec.branch_angle_deg;
    for side in [1.0, -1.0] {
        let th = if hi > lo { rng.random_range(lo..=hi) } else { lo }.to_radians();
        let child = normalize(add(scale(dir, th.cos()), scale(perp, side * th.sin())));
        grow(spec, rng, b, child, len * spec.length_decay, radius * spec.radius_decay, level + 1, out);
    }
}

fn segment_distance(p: [f64; 3], seg: &Segment) -> f64 {
    let ab = add(seg.b, scale(seg.a, -1.0));
    let ap = add(p, scale(seg.a, -1.0));
    let t = (dot(ap, ab) / dot(ab, ab)).clamp(0.0, 1.0);
    let d = add(ap, scale(ab, -t));
    dot(d, d).sqrt()
}

/// Rasterize one capsule into `full` (and `partial` when labeled); returns
/// whether it reaches outside the grid.
fn rasterize(seg: &Segment, s: f64, full: &mut Array3<u8>, partial: Option<&mut Array3<u8>>) -> bool {
    let n = full.shape()[0] as isize;
    let lo = [0, 1, 2].map(|a| ((seg.a[a].min(seg.b[a]) - seg.radius) / s).floor() as isize);
    let hi = [0, 1, 2].map(|a| ((seg.a[a].max(seg.b[a]) + seg.radius) / s).ceil() as isize);
    let clipped = lo.iter().any(|&v| v < 0) || hi.iter().any(|&v| v >= n);
    let lo = lo.map(|v| v.clamp(0, n) as usize);
    let hi = hi.map(|v| (v + 1).clamp(0, n) as usize);
    let mut hits = Vec::new();
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            for k in lo[2]..hi[2] {
                let p = [i as f64 * s, j as f64 * s, k as f64 * s];
                if segment_distance(p, seg) <= seg.radius {
                    hits.push([i, j, k]);
                }
            }
        }
    }
    for &h in &hits {
        full[h] = 1;
    }
    if let Some(pm) = partial {
        for &h in &hits {
            pm[h] = 1;
        }
    }
    clipped
}

/// Generate one phantom. Fails with [`Error::EmptyMask`] when no segment
/// reaches the annotation radius.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let seeds = SeedTree::new(spec.seed);
    let segments = tree(spec, &mut seeds.rng("tree"));
    let n = spec.size;
    let s = spec.spacing_mm;
    let mut full = Array3::<u8>::zeros((n, n, n));
    let mut partial = Array3::<u8>::zeros((n, n, n));
    let mut clipped = false;
    for seg in &segments {
        let labeled = seg.radius >= spec.annotation_radius_mm;
        clipped |= rasterize(seg, s, &mut full, labeled.then_some(&mut partial));
    }
    if clipped {
        log::warn!("phantom seed {}: tree leaves the grid; segments clipped", spec.seed);
    }

    let c = (n as f64 - 1.0) / 2.0;
    let r2 = (spec.tissue_radius_fraction * n as f64).powi(2);
    let mut rng = seeds.rng("intensity");
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| invalid(e.to_string()))?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
        let band = if full[[i, j, k]] != 0 {
            spec.vessel
        } else if (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2) <= r2 {
            spec.tissue
        } else {
            spec.background
        };
        let v = band.mean + band.std * std_normal.sample(&mut rng) + noise.sample(&mut rng);
        v as f32
    });

    let spacing = [s; 3];
    let volume = Volume::new(data, spacing)?;
    let full_mask = LabelMask::new(full, spacing)?;
    let partial_mask = LabelMask::new(partial, spacing)?;
    let extent = mask_bounding_box(&partial_mask)?.dilate(2, [n; 3]);
    Ok(Phantom {
        volume,
        full_mask,
        partial_mask,
        extent,
        segments,
        clipped,
    })
}

pub const IMAGE_FILE: &str = "image.nii.gz";
pub const MASK_FILE: &str = "mask.nii.gz";
pub const FULL_MASK_FILE: &str = "full_mask.nii.gz";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn case_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

/// Per-case spec: `base` with a seed forked from `seed` by case index.
pub fn case_spec(base: &PhantomSpec, seed: u64, i: usize) -> PhantomSpec {
    PhantomSpec {
        seed: SeedTree::new(seed).child_seed(&case_id(i)),
        ..base.clone()
    }
}

/// Write `n_cases` phantoms under `out_dir` (one directory per case, partial
/// label as `mask`) and the manifest pointing at them. Splits are left empty.
pub fn phantom_suite(n_cases: usize, base: &PhantomSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n_cases == 0 {
        return Err(invalid("phantom suite needs at least one case"));
    }
    base.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = map_range(ExecPolicy::default(), n_cases, |i| -> Result<CaseRecord> {
        let id = case_id(i);
        let ph = generate_phantom(&case_spec(base, seed, i))?;
        let dir = out_dir.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_volume(&ph.volume, dir.join(IMAGE_FILE))?;
        save_mask(&ph.partial_mask, dir.join(MASK_FILE))?;
        save_mask(&ph.full_mask, dir.join(FULL_MASK_FILE))?;
        let rel = PathBuf::from(&id);
        Ok(CaseRecord {
            patient: id.clone(),
            volume: rel.join(IMAGE_FILE),
            mask: rel.join(MASK_FILE),
            center: "phantom".into(),
            extent: Some(ph.extent),
            full_mask: Some(rel.join(FULL_MASK_FILE)),
            cache: None,
            id,
        })
    });
    let manifest = DatasetManifest::new(records.into_iter().collect::<Result<_>>()?)?.with_base_dir(out_dir);
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
