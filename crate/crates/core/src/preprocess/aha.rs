//! Adaptive histogram attention.
//!
//! The background mode of the global intensity histogram is located, the
//! valley that ends it becomes a cutoff, and intensities are clamped to the
//! cutoff and min-max mapped so `[cutoff, max] -> [0, 1]`. What remains is the
//! tissue/vessel part of the distribution, which forces the network to
//! separate vessels from tissue by structure rather than by threshold.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AhaParams {
    pub bins: usize,
    /// Centered moving-average window, in bins; odd.
    pub smoothing_window: usize,
    /// Fraction of the intensity range, from the bottom, searched for the
    /// background peak.
    pub background_search_fraction: f64,
}

impl Default for AhaParams {
    fn default() -> Self {
        Self {
            bins: 256,
            smoothing_window: 5,
            background_search_fraction: 1.0 / 3.0,
        }
    }
}

impl AhaParams {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 16 {
            return Err(invalid("AHA bins must be >= 16"));
        }
        if self.smoothing_window == 0 || self.smoothing_window.is_multiple_of(2) {
            return Err(invalid("AHA smoothing window must be odd and >= 1"));
        }
        if !(self.background_search_fraction > 0.0 && self.background_search_fraction <= 1.0) {
            return Err(invalid("AHA background search fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` edges.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Constant input: one bin whose two edges coincide.
    pub degenerate: bool,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_width(&self) -> f64 {
        (self.bin_edges[self.bins()] - self.bin_edges[0]) / self.bins() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.bin_edges[i] + self.bin_edges[i + 1])
    }

    /// Centered moving average, truncated at the ends.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let half = window / 2;
        let n = self.bins();
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(n - 1);
                self.counts[lo..=hi].iter().sum::<u64>() as f64 / (hi - lo + 1) as f64
            })
            .collect()
    }
}

/// Uniform bins over `[min, max]`; the maximum falls into the last bin.
pub fn compute_histogram(vol: &Volume, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(invalid("histogram needs at least 2 bins"));
    }
    let (lo, hi) = vol.min_max();
    let (lo, hi) = (lo as f64, hi as f64);
    if lo == hi {
        return Ok(Histogram {
            bin_edges: vec![lo, hi],
            counts: vec![vol.len() as u64],
            degenerate: true,
        });
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in vol.data() {
        counts[bin_of(v as f64, lo, hi, bins)] += 1;
    }
    let bin_edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + i as f64 * width })
        .collect();
    Ok(Histogram {
        bin_edges,
        counts,
        degenerate: false,
    })
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

/// Intensity separating the background mode from the rest.
///
/// The background peak is the tallest smoothed bin among the lowest
/// `background_search_fraction` of bins, and must be a local maximum of the
/// whole smoothed histogram. From there the smoothed counts are followed
/// downhill (through plateaus) until they strictly rise; the centre of the
/// bottom plateau is the cutoff. If the counts never rise again, the cutoff is
/// the bin edge with the most negative first difference after the peak. When
/// no background peak exists the minimum intensity is returned.
pub fn find_background_cutoff(hist: &Histogram, params: &AhaParams) -> f64 {
    let min = hist.bin_edges[0];
    if hist.degenerate || hist.bins() < 2 {
        return min;
    }
    let s = hist.smoothed(params.smoothing_window);
    let n = s.len();
    let region = ((params.background_search_fraction * n as f64).ceil() as usize).clamp(1, n);
    if hist.counts[..region].iter().all(|&c| c == 0) {
        return min;
    }
    let mut peak = 0;
    for i in 1..region {
        if s[i] > s[peak] {
            peak = i;
        }
    }
    if peak + 1 < n && s[peak + 1] > s[peak] {
        // Mass keeps rising past the search region: no background mode.
        return min;
    }

    let mut j = peak;
    while j + 1 < n && s[j + 1] <= s[j] {
        j += 1;
    }
    if j + 1 < n {
        let mut a = j;
        while a > peak && s[a - 1] == s[j] {
            a -= 1;
        }
        return 0.5 * (hist.center(a) + hist.center(j));
    }

    // Never rises again: steepest descent.
    if peak + 1 >= n {
        return hist.bin_edges[n];
    }
    let mut best = peak;
    for i in peak..n - 1 {
        if s[i + 1] - s[i] < s[best + 1] - s[best] {
            best = i;
        }
    }
    hist.bin_edges[best + 1]
}

#[derive(Clone, Debug)]
pub struct AhaOutput {
    pub volume: Volume,
    pub cutoff: f64,
    pub max: f64,
    pub degenerate: bool,
}

/// Vessel-like twin of `vol`, valued in `[0, 1]`.
pub fn adaptive_histogram_attention(vol: &Volume, params: &AhaParams) -> Result<Volume> {
    Ok(aha_detailed(vol, params)?.volume)
}

pub fn aha_detailed(vol: &Volume, params: &AhaParams) -> Result<AhaOutput> {
    params.validate()?;
    let hist = compute_histogram(vol, params.bins)?;
    let cutoff = find_background_cutoff(&hist, params);
    let max = vol.min_max().1 as f64;
    if !(max > cutoff) {
        log::warn!("AHA degenerate: cutoff {cutoff} >= max {max}; emitting zeros");
        return Ok(AhaOutput {
            volume: vol.map(|_| 0.0)?,
            cutoff,
            max,
            degenerate: true,
        });
    }
    let scale = 1.0 / (max - cutoff);
    let volume = vol.map(|v| (((v as f64).clamp(cutoff, max) - cutoff) * scale) as f32)?;
    Ok(AhaOutput {
        volume,
        cutoff,
        max,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol_from(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new(Array3::from_shape_vec((n, 1, 1), values).unwrap(), [1.0; 3]).unwrap()
    }

    fn hist_from_counts(counts: Vec<u64>, lo: f64, hi: f64) -> Histogram {
        let n = counts.len();
        Histogram {
            bin_edges: (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect(),
            counts,
            degenerate: false,
        }
    }

    fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
        (-0.5 * ((x - mu) / sigma).powi(2)).exp()
    }

    #[test]
    fn two_level_histogram() {
        let v = vol_from([0.0; 4].into_iter().chain([10.0; 4]).collect());
        let h = compute_histogram(&v, 2).unwrap();
        assert_eq!(h.counts, vec![4, 4]);
        assert_eq!(h.total(), 8);
    }

    #[test]
    fn histogram_matches_brute_force_binning() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f32> = (0..4096).map(|_| rng.random::<f32>() * 7.0 - 2.0).collect();
        let h = compute_histogram(&vol_from(values.clone()), 256).unwrap();
        let (lo, hi) = values.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let mut oracle = vec![0u64; 256];
        for &v in &values {
            // Linear scan over edges.
            let mut b = 255;
            for i in 0..256 {
                let upper = lo as f64 + (hi as f64 - lo as f64) * (i + 1) as f64 / 256.0;
                if (v as f64) < upper {
                    b = i;
                    break;
                }
            }
            oracle[b] += 1;
        }
        assert_eq!(h.counts, oracle);
        assert_eq!(h.total(), 4096);
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let h = compute_histogram(&vol_from(vec![3.0; 10]), 16).unwrap();
        assert!(h.degenerate);
        assert_eq!(h.total(), 10);
        let out = aha_detailed(&vol_from(vec![3.0; 10]), &AhaParams::default()).unwrap();
        assert!(out.degenerate);
        assert!(out.volume.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trimodal_valley() {
        // Modes at 10 (tallest), 50, 90 on [0, 100]; valley between 10 and 50.
        let bins = 100;
        let density = |x: f64| 1000.0 * gauss(x, 10.0, 5.0) + 300.0 * gauss(x, 50.0, 6.0) + 50.0 * gauss(x, 90.0, 4.0);
        let counts: Vec<u64> = (0..bins).map(|i| density(i as f64 + 0.5).round() as u64).collect();
        let h = hist_from_counts(counts, 0.0, 100.0);
        let s = h.smoothed(5);
        // Oracle: exhaustive search of the smoothed minimum between the modes.
        let valley = (10..50).min_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap()).unwrap();
        let cutoff = find_background_cutoff(&h, &AhaParams::default());
        assert!((cutoff - h.center(valley)).abs() <= h.bin_width(), "{cutoff} vs {}", h.center(valley));
        assert!((cutoff - 30.0).abs() <= 2.0 * h.bin_width() + 1.0, "{cutoff}");
    }

    #[test]
    fn monotone_decreasing_uses_steepest_descent() {
        let counts: Vec<u64> = (0..64u64).map(|i| if i < 20 { 1000 - 10 * i } else if i < 24 { 800 - 150 * (i - 19) } else { 10 }).collect();
        let h = hist_from_counts(counts, 0.0, 64.0);
        let s = h.smoothed(5);
        let mut best = 0;
        for i in 0..63 {
            if s[i + 1] - s[i] < s[best + 1] - s[best] {
                best = i;
            }
        }
        let c = find_background_cutoff(&h, &AhaParams::default());
        assert_eq!(c, h.bin_edges[best + 1]);
    }

    #[test]
    fn no_background_mass_is_noop() {
        let mut counts = vec![0u64; 64];
        for c in counts.iter_mut().skip(40) {
            *c = 50;
        }
        let h = hist_from_counts(counts, 0.0, 64.0);
        assert_eq!(find_background_cutoff(&h, &AhaParams::default()), 0.0);
    }

    #[test]
    fn affine_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut values: Vec<f32> = (0..3000).map(|_| 5.0 + rng.random::<f32>() * 2.0).collect();
        values.extend((0..500).map(|_| 40.0 + rng.random::<f32>() * 10.0));
        values.push(100.0);
        let v = vol_from(values);
        let out = aha_detailed(&v, &AhaParams::default()).unwrap();
        let (c, m) = (out.cutoff, out.max);
        let probe = vol_from(vec![c as f32, m as f32, ((c + m) / 2.0) as f32, 0.0]);
        let mapped = probe.map(|x| (((x as f64).clamp(c, m) - c) / (m - c)) as f32).unwrap();
        let got: Vec<f32> = mapped.data().iter().copied().collect();
        assert!(got[0].abs() < 1e-6 && (got[1] - 1.0).abs() < 1e-6 && (got[2] - 0.5).abs() < 1e-6);
        assert!(out.volume.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(out.volume.data()[[3000 + 500, 0, 0]], 1.0);
    }

    #[test]
    fn idempotent_when_cutoff_is_zero() {
        // Density rising towards 1: no background mode, so the cutoff is the minimum.
        // Deterministic quantiles of a density proportional to x^3 on [0, 1].
        let n = 200_000;
        let values: Vec<f32> = (0..=n).map(|i| (i as f64 / n as f64).powf(0.25) as f32).collect();
        let v = vol_from(values);
        let once = aha_detailed(&v, &AhaParams::default()).unwrap();
        assert_eq!(once.cutoff, 0.0);
        let twice = adaptive_histogram_attention(&once.volume, &AhaParams::default()).unwrap();
        let diff = once
            .volume
            .data()
            .iter()
            .zip(twice.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn fraction_of_zeros_covers_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = rand_distr::Normal::new(0.0f32, 4.0).unwrap();
        let mut values = Vec::new();
        for (mu, n) in [(20.0f32, 6000), (80.0, 3000), (160.0, 300)] {
            values.extend((0..n).map(|_| mu + rng.sample(normal)));
        }
        let v = vol_from(values.clone());
        let out = aha_detailed(&v, &AhaParams::default()).unwrap();
        let zeros = out.volume.data().iter().filter(|&&x| x == 0.0).count();
        let below = values.iter().filter(|&&x| (x as f64) < out.cutoff).count();
        assert!(zeros >= below);
        assert!(out.cutoff > 20.0 && out.cutoff < 80.0, "{}", out.cutoff);
    }

    #[test]
    fn params_validation() {
        assert!(AhaParams { bins: 8, ..Default::default() }.validate().is_err());
        assert!(AhaParams { smoothing_window: 4, ..Default::default() }.validate().is_err());
        assert!(AhaParams { background_search_fraction: 0.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn invariant_to_positive_affine_rescaling(seed in 0u64..1000, a in 0.1f32..20.0, b in -100.0f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = rand_distr::Normal::new(0.0f32, 5.0).unwrap();
            let mut values = Vec::new();
            for (mu, n) in [(20.0f32, 3000), (80.0, 1500), (160.0, 200)] {
                values.extend((0..n).map(|_| mu + rng.sample(normal)));
            }
            let v = vol_from(values);
            let w = v.map(|x| a * x + b).unwrap();
            let p = AhaParams::default();
            let (ov, ow) = (aha_detailed(&v, &p).unwrap(), aha_detailed(&w, &p).unwrap());
            let h = compute_histogram(&v, p.bins).unwrap();
            let tol = 2.0 * h.bin_width() / (ov.max - ov.cutoff);
            let diff = ov.volume.data().iter().zip(ow.volume.data().iter()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            prop_assert!((diff as f64) <= tol, "diff {} tol {}", diff, tol);
            prop_assert!(ow.volume.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
