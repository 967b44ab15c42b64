use ndarray::{s, Array3};

use crate::backbone::SegmentationNetwork;
use crate::error::{invalid, Result};
use crate::par::{self, ExecPolicy};
use crate::preprocess::{aha_detailed, grid_starts, normalize_intensity, AhaParams};
use crate::volume::{LabelMask, Volume};

/// Hard mask plus the averaged vessel probability.
#[derive(Clone, Debug)]
pub struct VolumePrediction {
    pub mask: LabelMask,
    pub probability: Volume,
}

/// Window starts covering `0..n`, the last one shifted inward if needed.
pub fn window_starts(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v = grid_starts(n, patch, stride);
    if let Some(&last) = v.last() {
        if last + patch < n {
            v.push(n - patch);
        }
    }
    v
}

const WINDOWS_PER_BATCH: usize = 16;

/// Sliding-window vessel probability of an already normalized input.
/// Overlaps are averaged with uniform weights.
pub fn predict_probability(
    net: &SegmentationNetwork,
    input: &Array3<f32>,
    patch: usize,
    stride: usize,
    policy: ExecPolicy,
) -> Result<Array3<f64>> {
    if stride == 0 || stride > patch {
        return Err(invalid("need 0 < stride <= patch"));
    }
    let sh = input.shape();
    if sh.iter().any(|&n| n < patch) {
        return Err(invalid(format!("volume {sh:?} smaller than patch {patch}")));
    }
    let starts: Vec<Vec<usize>> = sh.iter().map(|&n| window_starts(n, patch, stride)).collect();
    let mut windows = Vec::new();
    for &i in &starts[0] {
        for &j in &starts[1] {
            for &k in &starts[2] {
                windows.push([i, j, k]);
            }
        }
    }
    let mut sum = Array3::<f64>::zeros((sh[0], sh[1], sh[2]));
    let mut count = Array3::<u32>::zeros((sh[0], sh[1], sh[2]));
    for batch in windows.chunks(WINDOWS_PER_BATCH) {
        let preds = par::map_range(policy, batch.len(), |w| {
            let [i, j, k] = batch[w];
            let crop = input.slice(s![i..i + patch, j..j + patch, k..k + patch]).to_owned();
            net.forward(&crop).map(|p| p.vessel().to_owned())
        });
        for (&[i, j, k], p) in batch.iter().zip(preds) {
            let p = p?;
            let sl = s![i..i + patch, j..j + patch, k..k + patch];
            sum.slice_mut(sl).zip_mut_with(&p, |a, b| *a += b);
            count.slice_mut(sl).mapv_inplace(|c| c + 1);
        }
    }
    sum.zip_mut_with(&count, |a, &c| *a /= f64::from(c));
    Ok(sum)
}

/// Full-volume inference. `vol` is at network spacing; it is normalized (or
/// turned into its vessel-like twin) exactly as during preprocessing.
pub fn predict_volume(
    net: &SegmentationNetwork,
    vol: &Volume,
    patch: usize,
    stride: usize,
    use_vessel_like: bool,
    aha: &AhaParams,
    policy: ExecPolicy,
) -> Result<VolumePrediction> {
    let input = if use_vessel_like {
        aha_detailed(vol, aha)?.volume
    } else {
        normalize_intensity(vol)?
    };
    let prob = predict_probability(net, input.data(), patch, stride, policy)?;
    let mask = LabelMask::with_origin(prob.mapv(|p| u8::from(p > 0.5)), vol.spacing(), vol.origin())?;
    let probability = Volume::with_origin(prob.mapv(|p| p as f32), vol.spacing(), vol.origin())?;
    Ok(VolumePrediction { mask, probability })
}
