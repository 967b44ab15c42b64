use ndarray::Array3;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Which end of the spectrum the mask box is centered on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskConvention {
    /// Box around index `n/2` of the raw DFT grid: a high-pass filter.
    #[default]
    Unshifted,
    /// Box around DC: a low-pass filter.
    Shifted,
}

/// Binary spectral indicator with the same shape as a patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpectralMask {
    mask: Array3<u8>,
}

/// Per-axis indicator: index `i` is kept when its distance to the box center
/// is at most `rho * n / 2`. Distances are measured so that the result is
/// invariant under `i -> (n - i) mod n`.
fn axis_indicator(n: usize, rho: f64, convention: MaskConvention) -> Vec<bool> {
    let half = rho * n as f64 / 2.0 + 1e-9;
    (0..n)
        .map(|i| {
            let d = match convention {
                MaskConvention::Unshifted => (i as f64 - n as f64 / 2.0).abs(),
                MaskConvention::Shifted => i.min(n - i) as f64,
            };
            d <= half
        })
        .collect()
}

impl SpectralMask {
    pub fn new(shape: [usize; 3], rho: f64, convention: MaskConvention) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(invalid(format!("mask fraction must lie in (0,1), got {rho}")));
        }
        if shape.contains(&0) {
            return Err(invalid("empty mask shape"));
        }
        let ax: Vec<Vec<bool>> = shape.iter().map(|&n| axis_indicator(n, rho, convention)).collect();
        let mask = Array3::from_shape_fn(shape, |(i, j, k)| u8::from(ax[0][i] && ax[1][j] && ax[2][k]));
        Ok(Self { mask })
    }

    /// All-ones mask (identity filter).
    pub fn all_pass(shape: [usize; 3]) -> Self {
        Self {
            mask: Array3::from_elem(shape, 1),
        }
    }

    pub fn as_array(&self) -> &Array3<u8> {
        &self.mask
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.mask.shape();
        [s[0], s[1], s[2]]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn passes_dc(&self) -> bool {
        self.mask[[0, 0, 0]] != 0
    }
}

/// High-pass mask on the unshifted grid.
pub fn make_spectral_mask(shape: [usize; 3], rho: f64) -> Result<SpectralMask> {
    SpectralMask::new(shape, rho, MaskConvention::Unshifted)
}

/// In-place 3D DFT of a C-ordered buffer (unnormalized; inverse divides by N).
pub(crate) fn fft3(buf: &mut [Complex64], dims: [usize; 3], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let [d, h, w] = dims;
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        line.resize(n, Complex64::default());
        let s = strides[axis];
        for base in 0..d * h * w {
            // Visit each line once, from the element whose axis coordinate is 0.
            if (base / s) % n != 0 {
                continue;
            }
            for (t, v) in line.iter_mut().enumerate() {
                *v = buf[base + t * s];
            }
            fft.process(&mut line);
            for (t, v) in line.iter().enumerate() {
                buf[base + t * s] = *v;
            }
        }
    }
    if inverse {
        let scale = 1.0 / (d * h * w) as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }
}

/// `Re(IDFT(DFT(x) * mask))`.
pub fn high_frequency_component(x: &Array3<f64>, mask: &SpectralMask) -> Result<Array3<f64>> {
    if x.shape() != mask.mask.shape() {
        return Err(Error::shape(mask.mask.shape(), x.shape()));
    }
    let dims = mask.shape();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft3(&mut buf, dims, false);
    for (v, &m) in buf.iter_mut().zip(mask.mask.iter()) {
        if m == 0 {
            *v = Complex64::default();
        }
    }
    fft3(&mut buf, dims, true);
    Ok(Array3::from_shape_vec(dims, buf.into_iter().map(|c| c.re).collect()).expect("shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// O(N^2) transform straight from the DFT definition.
    fn direct_filter(x: &Array3<f64>, mask: &Array3<u8>) -> (Array3<f64>, f64) {
        let sh = x.shape();
        let (d, h, w) = (sh[0], sh[1], sh[2]);
        let mut spec = Array3::<Complex64>::zeros((d, h, w));
        for ((a, b, c), s) in spec.indexed_iter_mut() {
            for ((i, j, k), &v) in x.indexed_iter() {
                let ph = -2.0 * PI * ((a * i) as f64 / d as f64 + (b * j) as f64 / h as f64 + (c * k) as f64 / w as f64);
                *s += Complex64::from_polar(v, ph);
            }
            if mask[[a, b, c]] == 0 {
                *s = Complex64::default();
            }
        }
        let mut out = Array3::<f64>::zeros((d, h, w));
        let mut max_im = 0f64;
        for ((i, j, k), o) in out.indexed_iter_mut() {
            let mut acc = Complex64::default();
            for ((a, b, c), s) in spec.indexed_iter() {
                let ph = 2.0 * PI * ((a * i) as f64 / d as f64 + (b * j) as f64 / h as f64 + (c * k) as f64 / w as f64);
                acc += s * Complex64::from_polar(1.0, ph);
            }
            acc /= (d * h * w) as f64;
            *o = acc.re;
            max_im = max_im.max(acc.im.abs());
        }
        (out, max_im)
    }

    #[test]
    fn mask_counts_and_symmetry() {
        // A symmetric box on an even grid has an odd side: 8 * 0.5 -> 5.
        let m = make_spectral_mask([8, 8, 8], 0.5).unwrap();
        assert_eq!(m.count(), 125);
        assert!(!m.passes_dc());
        let m7 = make_spectral_mask([7, 7, 7], 0.5).unwrap();
        assert_eq!(m7.count(), 64);
        for (mask, n) in [(&m, 8), (&m7, 7)] {
            for ((i, j, k), &v) in mask.as_array().indexed_iter() {
                assert_eq!(v, mask.as_array()[[(n - i) % n, (n - j) % n, (n - k) % n]]);
            }
        }
        let low = SpectralMask::new([8, 8, 8], 0.5, MaskConvention::Shifted).unwrap();
        assert!(low.passes_dc());
        assert_eq!(low.count(), 125);
        assert!(make_spectral_mask([4, 4, 4], 1.0).is_err());
        assert!(make_spectral_mask([4, 4, 4], 0.0).is_err());
    }

    #[test]
    fn matches_direct_dft_and_is_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for shape in [[4, 4, 4], [3, 4, 5]] {
            let x = Array3::from_shape_fn(shape, |_| rng.random::<f64>());
            let m = make_spectral_mask(shape, 0.5).unwrap();
            let fast = high_frequency_component(&x, &m).unwrap();
            let (slow, im) = direct_filter(&x, m.as_array());
            assert!(im <= 1e-12, "imaginary residue {im}");
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_and_identity_and_near_full() {
        let c = Array3::from_elem((8, 8, 8), 0.7);
        let m = make_spectral_mask([8, 8, 8], 0.5).unwrap();
        assert!(high_frequency_component(&c, &m).unwrap().iter().all(|v| v.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((8, 8, 8), |_| rng.random::<f64>());
        let id = high_frequency_component(&x, &SpectralMask::all_pass([8, 8, 8])).unwrap();
        assert!(id.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        // Near-full box keeps everything but the DC shell (index 0 on some axis).
        let near = make_spectral_mask([8, 8, 8], 0.99).unwrap();
        assert_eq!(near.count(), 7 * 7 * 7);
        let (slow, _) = direct_filter(&x, near.as_array());
        let fast = high_frequency_component(&x, &near).unwrap();
        assert!(fast.iter().zip(slow.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let mean = x.mean().unwrap();
        let centered: f64 = fast.iter().zip(x.iter()).map(|(h, v)| (h - (v - mean)).powi(2)).sum::<f64>();
        let total: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        assert!(centered < total, "near-full high-pass should stay close to x - mean");
    }

    #[test]
    fn impulse_response_is_shifted_inverse_mask() {
        let m = make_spectral_mask([4, 4, 4], 0.5).unwrap();
        let mut imp = Array3::<f64>::zeros((4, 4, 4));
        imp[[1, 2, 3]] = 1.0;
        let out = high_frequency_component(&imp, &m).unwrap();
        let mut delta0 = Array3::<f64>::zeros((4, 4, 4));
        delta0[[0, 0, 0]] = 1.0;
        let kernel = high_frequency_component(&delta0, &m).unwrap();
        for ((i, j, k), &v) in out.indexed_iter() {
            let r = kernel[[(i + 3) % 4, (j + 2) % 4, (k + 1) % 4]];
            assert!((v - r).abs() < 1e-12);
        }
        // Kernel is the inverse DFT of the mask.
        let ksum: f64 = kernel.sum();
        assert!((ksum - m.mask[[0, 0, 0]] as f64).abs() < 1e-12);
    }
}
