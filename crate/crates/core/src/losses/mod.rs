//! Supervised and teacher-student consistency losses.
//!
//! Every loss is a voxel mean. The `*_with_grad` variants also return the
//! gradient with respect to the first prediction's probabilities; pair it
//! with [`crate::backbone::softmax_backward`] to reach the logits.

pub mod dense;
mod spectral;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::Prediction;
use crate::error::{invalid, Result};
use crate::volume::LabelMask;

pub use dense::{CosineForm, CE_EPSILON, COSINE_EPSILON};
pub use spectral::{high_frequency_component, make_spectral_mask, MaskConvention, SpectralMask};

/// Anything carrying a binary label grid.
pub trait Labels {
    fn labels(&self) -> &Array3<u8>;
}

impl Labels for Array3<u8> {
    fn labels(&self) -> &Array3<u8> {
        self
    }
}

impl Labels for LabelMask {
    fn labels(&self) -> &Array3<u8> {
        self.data()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub sup_weight: f64,
    pub semi_weight: f64,
    pub dice_epsilon: f64,
    pub boundary_mask_fraction: f64,
    pub cosine_form: CosineForm,
    pub mask_convention: MaskConvention,
    /// Include the Fourier boundary term in the supervised loss.
    pub boundary: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sup_weight: 4.0,
            semi_weight: 1.0,
            dice_epsilon: 1e-5,
            boundary_mask_fraction: 0.5,
            cosine_form: CosineForm::ExpNegativeCos,
            mask_convention: MaskConvention::Unshifted,
            boundary: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sup_weight >= 0.0 && self.semi_weight >= 0.0) || self.sup_weight + self.semi_weight <= 0.0 {
            return Err(invalid("loss weights must be non-negative and not both zero"));
        }
        if !(self.boundary_mask_fraction > 0.0 && self.boundary_mask_fraction < 1.0) {
            return Err(invalid("boundary_mask_fraction must lie in (0,1)"));
        }
        if !(self.dice_epsilon >= 0.0) {
            return Err(invalid("dice_epsilon must be non-negative"));
        }
        Ok(())
    }

    pub fn spectral_mask(&self, shape: [usize; 3]) -> Result<SpectralMask> {
        SpectralMask::new(shape, self.boundary_mask_fraction, self.mask_convention)
    }
}

pub fn cross_entropy_loss(pred: &Prediction, target: &impl Labels) -> Result<f64> {
    Ok(dense::cross_entropy(pred.probs(), target.labels())?.0)
}

pub fn cross_entropy_with_grad(pred: &Prediction, target: &impl Labels) -> Result<(f64, Array4<f64>)> {
    dense::cross_entropy(pred.probs(), target.labels())
}

pub fn dice_loss(pred: &Prediction, target: &impl Labels, eps: f64) -> Result<f64> {
    Ok(dense::dice(pred.probs(), target.labels(), eps)?.0)
}

fn boundary_grad(pred: &Prediction, target: &Array3<u8>, mask: &SpectralMask) -> Result<(f64, Array4<f64>)> {
    let p1 = pred.vessel().to_owned();
    let (loss, g) = dense::boundary(&p1, &target.mapv(f64::from), mask)?;
    let mut grad = Array4::zeros(pred.probs().raw_dim());
    grad.index_axis_mut(Axis(0), 1).assign(&g);
    Ok((loss, grad))
}

/// Boundary loss on the vessel channel.
pub fn fourier_boundary_loss(pred: &Prediction, target: &impl Labels, mask: &SpectralMask) -> Result<f64> {
    Ok(boundary_grad(pred, target.labels(), mask)?.0)
}

pub fn consistency_mse(a: &Prediction, b: &Prediction) -> Result<f64> {
    Ok(dense::mse(a.probs(), b.probs())?.0)
}

pub fn consistency_cosine_loss(a: &Prediction, b: &Prediction, form: CosineForm) -> Result<f64> {
    Ok(dense::cosine(a.probs(), b.probs(), form)?.0)
}

/// Per-term supervised loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedTerms {
    pub ce: f64,
    pub dice: f64,
    pub boundary: f64,
    pub total: f64,
}

/// `CE + Dice + boundary`, the boundary term only when a mask is given.
pub fn total_supervised_loss(
    pred: &Prediction,
    target: &impl Labels,
    mask: Option<&SpectralMask>,
    cfg: &LossConfig,
) -> Result<SupervisedTerms> {
    Ok(supervised_with_grad(pred, target, mask, cfg)?.0)
}

pub fn supervised_with_grad(
    pred: &Prediction,
    target: &impl Labels,
    mask: Option<&SpectralMask>,
    cfg: &LossConfig,
) -> Result<(SupervisedTerms, Array4<f64>)> {
    let y = target.labels();
    let (ce, mut grad) = dense::cross_entropy(pred.probs(), y)?;
    let (dice, gd) = dense::dice(pred.probs(), y, cfg.dice_epsilon)?;
    grad += &gd;
    let mut boundary = 0.0;
    if let Some(mask) = mask {
        let (b, gb) = boundary_grad(pred, y, mask)?;
        boundary = b;
        grad += &gb;
    }
    let terms = SupervisedTerms {
        ce,
        dice,
        boundary,
        total: ce + dice + boundary,
    };
    Ok((terms, grad))
}

/// Consistency terms for one teacher/student pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyTerms {
    pub mse: f64,
    pub sim: f64,
}

/// MSE plus cosine consistency; gradient is with respect to `teacher`.
pub fn consistency_with_grad(
    teacher: &Prediction,
    student: &Prediction,
    form: CosineForm,
) -> Result<(ConsistencyTerms, Array4<f64>)> {
    let (mse, mut grad) = dense::mse(teacher.probs(), student.probs())?;
    let (sim, gs) = dense::cosine(teacher.probs(), student.probs(), form)?;
    grad += &gs;
    Ok((ConsistencyTerms { mse, sim }, grad))
}

/// Weighted mean `(ws * sup + wu * semi) / (ws + wu)`.
pub fn total_loss(sup: f64, semi: f64, cfg: &LossConfig) -> f64 {
    let (ws, wu) = (cfg.sup_weight, cfg.semi_weight);
    (ws * sup + wu * semi) / (ws + wu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pred(rng: &mut ChaCha8Rng, n: usize) -> Prediction {
        Prediction::from_vessel(&Array3::from_shape_fn((n, n, n), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn total_loss_weights() {
        let cfg = LossConfig::default();
        assert!((total_loss(1.0, 0.0, &cfg) - 0.8).abs() < 1e-15);
        let sup_only = LossConfig { sup_weight: 1.0, semi_weight: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(0.3, 9.0, &sup_only), 0.3);
        assert!(LossConfig { sup_weight: 0.0, semi_weight: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn supervised_is_additive_and_vanishes_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LossConfig::default();
        let mask = make_spectral_mask([8, 8, 8], 0.5).unwrap();
        let pred = random_pred(&mut rng, 8);
        let y = Array3::from_shape_fn((8, 8, 8), |_| u8::from(rng.random::<bool>()));
        let t = total_supervised_loss(&pred, &y, Some(&mask), &cfg).unwrap();
        let sum = cross_entropy_loss(&pred, &y).unwrap()
            + dice_loss(&pred, &y, cfg.dice_epsilon).unwrap()
            + fourier_boundary_loss(&pred, &y, &mask).unwrap();
        assert!((t.total - sum).abs() < 1e-12);
        assert!(t.ce > 0.0 && t.dice > 0.0 && t.boundary > 0.0);

        let perfect = Prediction::from_vessel(&y.mapv(f64::from)).unwrap();
        let t = total_supervised_loss(&perfect, &y, Some(&mask), &cfg).unwrap();
        assert!(t.total <= 1e-5, "{t:?}");
    }

    #[test]
    fn boundary_ignores_constant_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mask = make_spectral_mask([8, 8, 8], 0.5).unwrap();
        let y = Array3::from_shape_fn((8, 8, 8), |_| f64::from(u8::from(rng.random::<bool>())));
        let p = Array3::from_shape_fn((8, 8, 8), |_| rng.random::<f64>());
        let base = dense::boundary(&p, &y, &mask).unwrap().0;
        assert!((dense::boundary(&(&p + 0.1), &y, &mask).unwrap().0 - base).abs() < 1e-10);
        assert!((dense::boundary(&(&p + 0.3), &(&y + 0.3), &mask).unwrap().0 - base).abs() < 1e-10);
        assert!(dense::boundary(&(&y + 0.1), &y, &mask).unwrap().0 < 1e-20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn consistency_is_symmetric_and_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pred(&mut rng, 3);
            let b = random_pred(&mut rng, 3);
            prop_assert_eq!(consistency_mse(&a, &b).unwrap(), consistency_mse(&b, &a).unwrap());
            prop_assert!(consistency_mse(&a, &b).unwrap() >= 0.0);
            let f = CosineForm::ExpNegativeCos;
            let (ab, ba) = (consistency_cosine_loss(&a, &b, f).unwrap(), consistency_cosine_loss(&b, &a, f).unwrap());
            prop_assert!((ab - ba).abs() <= 1e-15 * ab.abs());
            prop_assert!(ab >= (-1f64).exp() - 1e-12 && ab <= 1f64.exp() + 1e-12);
        }

        #[test]
        fn total_loss_is_monotone(sup in 0.0..10.0f64, semi in 0.0..10.0f64, d in 0.0..1.0f64, ws in 0.0..5.0f64, wu in 0.1..5.0f64) {
            let cfg = LossConfig { sup_weight: ws, semi_weight: wu, ..Default::default() };
            prop_assert!(total_loss(sup + d, semi, &cfg) >= total_loss(sup, semi, &cfg));
            prop_assert!(total_loss(sup, semi + d, &cfg) >= total_loss(sup, semi, &cfg));
            prop_assert!((total_loss(sup, sup, &cfg) - sup).abs() <= 1e-12 * sup.max(1.0));
        }

        #[test]
        fn supervised_terms_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = random_pred(&mut rng, 4);
            let y = Array3::from_shape_fn((4, 4, 4), |_| u8::from(rng.random::<bool>()));
            let mask = make_spectral_mask([4, 4, 4], 0.5).unwrap();
            let t = total_supervised_loss(&pred, &y, Some(&mask), &LossConfig::default()).unwrap();
            prop_assert!(t.ce >= 0.0 && (0.0..=1.0).contains(&t.dice) && t.boundary >= 0.0);
        }
    }
}
