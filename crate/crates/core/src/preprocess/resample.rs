use ndarray::Array3;

use crate::error::{invalid, Result};
use crate::volume::{LabelMask, Vec3, Volume};

/// Isotropic target spacing used for the clinical data, in mm.
pub const DEFAULT_SPACING_MM: f64 = 0.35;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInterpolation {
    #[default]
    Nearest,
    /// Trilinear interpolation of the {0,1} field, thresholded at 0.5.
    LinearThreshold,
}

/// Resample to `target` spacing: trilinear for the image, nearest-neighbour
/// for the mask.
pub fn resample_to_spacing(vol: &Volume, mask: Option<&LabelMask>, target: Vec3) -> Result<(Volume, Option<LabelMask>)> {
    resample_to_spacing_with(vol, mask, target, MaskInterpolation::Nearest)
}

pub fn resample_to_spacing_with(
    vol: &Volume,
    mask: Option<&LabelMask>,
    target: Vec3,
    mask_interp: MaskInterpolation,
) -> Result<(Volume, Option<LabelMask>)> {
    if target.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(invalid(format!("target spacing must be positive, got {target:?}")));
    }
    if let Some(m) = mask {
        if m.shape() != vol.shape() {
            return Err(crate::Error::shape(&vol.shape(), &m.shape()));
        }
    }
    let src = vol.spacing();
    if (0..3).all(|a| (src[a] - target[a]).abs() <= 1e-9 * target[a]) {
        return Ok((vol.clone(), mask.cloned()));
    }
    let shape_in = vol.shape();
    let shape_out: [usize; 3] = [0, 1, 2].map(|a| (shape_in[a] as f64 * src[a] / target[a]).round() as usize);
    if shape_out.iter().any(|&n| n < 4) {
        return Err(invalid(format!("resampled shape {shape_out:?} has a dimension below 4")));
    }
    // Output voxel j sits at input coordinate (j + 0.5) * t / s - 0.5.
    let maps: [Vec<f64>; 3] = [0, 1, 2].map(|a| {
        let ratio = target[a] / src[a];
        (0..shape_out[a])
            .map(|j| ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (shape_in[a] - 1) as f64))
            .collect()
    });
    let origin: Vec3 = [0, 1, 2].map(|a| vol.origin()[a] + 0.5 * (target[a] - src[a]));

    let img = trilinear(vol.data(), &maps);
    let out_vol = Volume::with_origin(img, target, origin)?;
    let out_mask = match mask {
        None => None,
        Some(m) => {
            let data = match mask_interp {
                MaskInterpolation::Nearest => {
                    let idx: [Vec<usize>; 3] = [0, 1, 2].map(|a| maps[a].iter().map(|c| c.round() as usize).collect());
                    Array3::from_shape_fn(shape_out, |(i, j, k)| m.data()[[idx[0][i], idx[1][j], idx[2][k]]])
                }
                MaskInterpolation::LinearThreshold => {
                    trilinear(&m.data().mapv(f32::from), &maps).mapv(|v| u8::from(v >= 0.5))
                }
            };
            Some(LabelMask::with_origin(data, target, origin)?)
        }
    };
    Ok((out_vol, out_mask))
}

fn trilinear(src: &Array3<f32>, maps: &[Vec<f64>; 3]) -> Array3<f32> {
    let sh = src.shape();
    let lerp_axis = |c: f64, n: usize| {
        let i0 = (c.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let ax: [Vec<(usize, usize, f64)>; 3] = [0, 1, 2].map(|a| maps[a].iter().map(|&c| lerp_axis(c, sh[a])).collect());
    Array3::from_shape_fn((maps[0].len(), maps[1].len(), maps[2].len()), |(i, j, k)| {
        let (i0, i1, fi) = ax[0][i];
        let (j0, j1, fj) = ax[1][j];
        let (k0, k1, fk) = ax[2][k];
        let g = |a, b, c| src[[a, b, c]] as f64;
        let c00 = g(i0, j0, k0) * (1.0 - fk) + g(i0, j0, k1) * fk;
        let c01 = g(i0, j1, k0) * (1.0 - fk) + g(i0, j1, k1) * fk;
        let c10 = g(i1, j0, k0) * (1.0 - fk) + g(i1, j0, k1) * fk;
        let c11 = g(i1, j1, k0) * (1.0 - fk) + g(i1, j1, k1) * fk;
        let c0 = c00 * (1.0 - fj) + c01 * fj;
        let c1 = c10 * (1.0 - fj) + c11 * fj;
        (c0 * (1.0 - fi) + c1 * fi) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::count_components;

    #[test]
    fn doubles_resolution() {
        let v = Volume::new(Array3::from_elem((64, 64, 64), 3.0), [0.7; 3]).unwrap();
        let (out, _) = resample_to_spacing(&v, None, [0.35; 3]).unwrap();
        assert_eq!(out.shape(), [128, 128, 128]);
        assert_eq!(out.spacing(), [0.35; 3]);
    }

    #[test]
    fn identity_short_circuit() {
        let v = Volume::new(Array3::from_shape_fn((5, 6, 7), |(i, j, k)| (i * j + k) as f32), [0.35; 3]).unwrap();
        let (out, _) = resample_to_spacing(&v, None, [0.35; 3]).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn constant_stays_constant() {
        let v = Volume::new(Array3::from_elem((10, 9, 8), 42.5), [0.5, 0.8, 1.1]).unwrap();
        for t in [[0.35; 3], [1.3, 0.9, 0.6]] {
            let (out, _) = resample_to_spacing(&v, None, t).unwrap();
            assert!(out.data().iter().all(|&x| x == 42.5));
        }
    }

    #[test]
    fn too_small_output() {
        let v = Volume::new(Array3::zeros((8, 8, 8)), [0.35; 3]).unwrap();
        assert!(resample_to_spacing(&v, None, [1.0; 3]).is_err());
    }

    #[test]
    fn mask_stays_binary_and_tube_connected() {
        let n = 24;
        let data = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
            let (dj, dk) = (j as f64 - 12.0, k as f64 - 11.5 - 0.2 * i as f64);
            u8::from(dj * dj + dk * dk <= 4.0)
        });
        let m = LabelMask::new(data, [0.7; 3]).unwrap();
        let v = m.to_volume();
        assert_eq!(count_components(m.data()), 1);
        for interp in [MaskInterpolation::Nearest, MaskInterpolation::LinearThreshold] {
            let (_, out) = resample_to_spacing_with(&v, Some(&m), [0.35; 3], interp).unwrap();
            let out = out.unwrap();
            assert!(out.data().iter().all(|&x| x <= 1));
            assert_eq!(count_components(out.data()), 1, "{interp:?}");
            assert_eq!(out.shape(), [48, 48, 48]);
        }
    }
}
