//! Resolution standardization, adaptive histogram attention (AHA) and
//! overlapped patch grouping into labeled/unlabeled streams.

mod aha;
mod cache;
mod patches;
mod resample;

pub use aha::{
    adaptive_histogram_attention, aha_detailed, compute_histogram, find_background_cutoff, AhaOutput, AhaParams,
    Histogram,
};
pub use cache::{preprocess_case, CaseCache, PatchIndex, PatchIndexEntry, PreprocessConfig};
pub use patches::{extract_patches, extract_patches_with, grid_positions, grid_starts, normalize_intensity, Patch, PatchGroup, PatchSet};
pub use resample::{resample_to_spacing, resample_to_spacing_with, MaskInterpolation, DEFAULT_SPACING_MM};
