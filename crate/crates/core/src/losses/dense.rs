//! Array-level losses returning `(value, d value / d first argument)`.
//!
//! Inputs are not required to be normalized, which is what finite-difference
//! probing needs. Probability arrays are `[2, D, H, W]`; channel 1 is vessel.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::spectral::{high_frequency_component, SpectralMask};
use crate::error::{Error, Result};

/// Probability clip used by the cross-entropy.
pub const CE_EPSILON: f64 = 1e-7;
/// Added to vector norms in the cosine consistency.
pub const COSINE_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineForm {
    /// `exp(-cos)`, in `[e^-1, e]`.
    #[default]
    ExpNegativeCos,
    /// `exp(cos)`, in `[e^-1, e]`; minimizing it pushes predictions apart.
    #[serde(rename = "paper_exact_exp_cos")]
    ExpPositiveCos,
    /// `-cos`, in `[-1, 1]`.
    NegativeCos,
}

fn check_probs(p: &Array4<f64>, y: &Array3<u8>) -> Result<()> {
    let ps = p.shape();
    if ps[0] != 2 || &ps[1..] != y.shape() {
        return Err(Error::shape(&[&[2], y.shape()].concat(), ps));
    }
    Ok(())
}

/// Voxel-mean of `-ln clip(p[y])`.
pub fn cross_entropy(p: &Array4<f64>, y: &Array3<u8>) -> Result<(f64, Array4<f64>)> {
    check_probs(p, y)?;
    let n = y.len() as f64;
    let mut grad = Array4::zeros(p.raw_dim());
    let mut loss = 0.0;
    for ((i, j, k), &t) in y.indexed_iter() {
        let c = usize::from(t != 0);
        let q = p[[c, i, j, k]];
        let qc = q.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
        loss -= qc.ln();
        if q == qc {
            grad[[c, i, j, k]] = -1.0 / (n * q);
        }
    }
    Ok((loss / n, grad))
}

/// Soft Dice on the vessel channel: `1 - (2 sum(p y) + eps) / (sum p + sum y + eps)`.
pub fn dice(p: &Array4<f64>, y: &Array3<u8>, eps: f64) -> Result<(f64, Array4<f64>)> {
    check_probs(p, y)?;
    let p1 = p.index_axis(Axis(0), 1);
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&q, &t) in p1.iter().zip(y.iter()) {
        let t = f64::from(u8::from(t != 0));
        inter += q * t;
        sp += q;
        sy += t;
    }
    let num = 2.0 * inter + eps;
    let den = sp + sy + eps;
    let mut grad = Array4::zeros(p.raw_dim());
    grad.index_axis_mut(Axis(0), 1)
        .zip_mut_with(y, |g, &t| {
            let t = f64::from(u8::from(t != 0));
            *g = -(2.0 * t * den - num) / (den * den);
        });
    Ok((1.0 - num / den, grad))
}

/// Voxel-mean of `(H(p) - H(y))^2` for real fields `p`, `y`.
///
/// `H` is a real symmetric projection when the mask is reflection symmetric,
/// so the gradient is `2/N * H(H(p) - H(y))`.
pub fn boundary(p: &Array3<f64>, y: &Array3<f64>, mask: &SpectralMask) -> Result<(f64, Array3<f64>)> {
    if p.shape() != y.shape() {
        return Err(Error::shape(y.shape(), p.shape()));
    }
    let n = p.len() as f64;
    let diff = high_frequency_component(&(p - y), mask)?;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = high_frequency_component(&diff, mask)? * (2.0 / n);
    Ok((loss, grad))
}

fn check_pair(a: &Array4<f64>, b: &Array4<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(b.shape(), a.shape()));
    }
    Ok(())
}

/// Mean over voxels and channels of `(a - b)^2`.
pub fn mse(a: &Array4<f64>, b: &Array4<f64>) -> Result<(f64, Array4<f64>)> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let d = a - b;
    let loss = d.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, d * (2.0 / n)))
}

/// Cosine consistency of the flattened arrays.
pub fn cosine(a: &Array4<f64>, b: &Array4<f64>, form: CosineForm) -> Result<(f64, Array4<f64>)> {
    check_pair(a, b)?;
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (ga, gb) = (na + COSINE_EPSILON, nb + COSINE_EPSILON);
    let cos = dot / (ga * gb);
    let (value, outer) = match form {
        CosineForm::ExpNegativeCos => ((-cos).exp(), -(-cos).exp()),
        CosineForm::ExpPositiveCos => (cos.exp(), cos.exp()),
        CosineForm::NegativeCos => (-cos, -1.0),
    };
    // d cos / d a = b / (ga gb) - dot / (ga^2 gb) * a / |a|
    let radial = if na > 0.0 { dot / (ga * ga * gb * na) } else { 0.0 };
    let mut grad = Array4::zeros(a.raw_dim());
    ndarray::Zip::from(&mut grad)
        .and(a)
        .and(b)
        .for_each(|g, &x, &y| *g = outer * (y / (ga * gb) - radial * x));
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs(rng: &mut ChaCha8Rng, n: usize) -> Array4<f64> {
        let v = Array3::from_shape_fn((n, n, n), |_| rng.random_range(0.05..0.95));
        Array4::from_shape_fn((2, n, n, n), |(c, i, j, k)| if c == 1 { v[[i, j, k]] } else { 1.0 - v[[i, j, k]] })
    }

    fn labels(rng: &mut ChaCha8Rng, n: usize) -> Array3<u8> {
        Array3::from_shape_fn((n, n, n), |_| u8::from(rng.random::<bool>()))
    }

    fn fd_check4(f: impl Fn(&Array4<f64>) -> f64, x: &Array4<f64>, g: &Array4<f64>) {
        let h = 1e-4;
        let mut x = x.clone();
        let scale = g.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            x.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = f(&x);
            x.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = f(&x);
            x.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-3 * scale, "idx {idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn analytic_values() {
        let half = Array4::from_elem((2, 2, 2, 2), 0.5);
        let y = Array3::from_shape_fn((2, 2, 2), |(i, _, _)| u8::from(i == 0));
        assert!((cross_entropy(&half, &y).unwrap().0 - std::f64::consts::LN_2).abs() < 1e-12);
        let eps = 1e-5;
        let expect = 1.0 - (4.0 + eps) / (8.0 + eps);
        assert!((dice(&half, &y, eps).unwrap().0 - expect).abs() < 1e-12);

        let mut onehot = Array4::zeros((2, 2, 2, 2));
        for ((i, j, k), &t) in y.indexed_iter() {
            onehot[[usize::from(t), i, j, k]] = 1.0;
        }
        assert!(cross_entropy(&onehot, &y).unwrap().0 <= 1e-6);
        assert!(dice(&onehot, &y, eps).unwrap().0 < 1e-5);
        let mut none = onehot.clone();
        none.index_axis_mut(Axis(0), 1).fill(0.0);
        assert!((dice(&none, &y, eps).unwrap().0 - 1.0).abs() < 1e-5);
        let empty = Array3::zeros((2, 2, 2));
        assert_eq!(dice(&none, &empty, eps).unwrap().0, 0.0);
    }

    #[test]
    fn mse_single_voxel_convention() {
        let a = Array4::from_shape_fn((2, 2, 2, 2), |(c, ..)| if c == 1 { 0.0 } else { 1.0 });
        let mut b = a.clone();
        b[[0, 0, 0, 0]] = 0.0;
        b[[1, 0, 0, 0]] = 1.0;
        assert!((mse(&a, &b).unwrap().0 - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = probs(&mut rng, 3);
        let e = std::f64::consts::E;
        assert!((cosine(&u, &u, CosineForm::ExpNegativeCos).unwrap().0 - 1.0 / e).abs() < 1e-9);
        assert!((cosine(&u, &-&u, CosineForm::ExpNegativeCos).unwrap().0 - e).abs() < 1e-9);
        assert!((cosine(&u, &u, CosineForm::ExpPositiveCos).unwrap().0 - e).abs() < 1e-9);
        assert!((cosine(&u, &u, CosineForm::NegativeCos).unwrap().0 + 1.0).abs() < 1e-9);
        let z = Array4::zeros(u.raw_dim());
        assert!(cosine(&z, &u, CosineForm::ExpNegativeCos).unwrap().0.is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let p = probs(&mut rng, 4);
            let q = probs(&mut rng, 4);
            let y = labels(&mut rng, 4);
            let (_, g) = cross_entropy(&p, &y).unwrap();
            fd_check4(|x| cross_entropy(x, &y).unwrap().0, &p, &g);
            let (_, g) = dice(&p, &y, 1e-5).unwrap();
            fd_check4(|x| dice(x, &y, 1e-5).unwrap().0, &p, &g);
            let (_, g) = mse(&p, &q).unwrap();
            fd_check4(|x| mse(x, &q).unwrap().0, &p, &g);
            for form in [CosineForm::ExpNegativeCos, CosineForm::ExpPositiveCos, CosineForm::NegativeCos] {
                let (_, g) = cosine(&p, &q, form).unwrap();
                fd_check4(|x| cosine(x, &q, form).unwrap().0, &p, &g);
            }
            let mask = super::super::make_spectral_mask([4, 4, 4], 0.5).unwrap();
            let p1 = p.index_axis(Axis(0), 1).to_owned();
            let yf = y.mapv(f64::from);
            let (_, g) = boundary(&p1, &yf, &mask).unwrap();
            let g4 = g.clone().insert_axis(Axis(0));
            fd_check4(
                |x| boundary(&x.index_axis(Axis(0), 0).to_owned(), &yf, &mask).unwrap().0,
                &p1.clone().insert_axis(Axis(0)),
                &g4,
            );
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = Array4::from_elem((2, 2, 2, 2), 0.5);
        let y = Array3::zeros((2, 2, 3));
        assert!(cross_entropy(&p, &y).is_err());
        assert!(dice(&p, &y, 1e-5).is_err());
        assert!(mse(&p, &Array4::zeros((2, 2, 2, 3))).is_err());
    }
}
