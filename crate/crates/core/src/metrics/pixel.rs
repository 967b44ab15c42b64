use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AnnotationExtent, LabelMask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Voxel counts inside `roi`.
pub fn confusion(pred: &LabelMask, gt: &LabelMask, roi: &AnnotationExtent) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(&gt.shape(), &pred.shape()));
    }
    roi.check_within(gt.shape())?;
    let mut c = ConfusionCounts::default();
    let sl = roi.slice();
    Zip::from(pred.data().slice(sl)).and(gt.data().slice(sl)).for_each(|&p, &g| match (p != 0, g != 0) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, false) => c.tn += 1,
        (false, true) => c.fn_ += 1,
    });
    Ok(c)
}

/// The six overlap metrics. Any `0/0` is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub dsc: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub specificity: f64,
    pub jaccard: f64,
    /// Volume similarity `1 - |fp - fn| / (2 tp + fp + fn)`.
    pub vs: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        log::debug!("0/0 metric treated as 1");
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn pixel_metrics(c: &ConfusionCounts) -> PixelMetrics {
    let ConfusionCounts { tp, fp, tn, fn_ } = *c;
    let union = 2 * tp + fp + fn_;
    PixelMetrics {
        dsc: ratio(2 * tp, union),
        sensitivity: ratio(tp, tp + fn_),
        precision: ratio(tp, tp + fp),
        specificity: ratio(tn, tn + fp),
        jaccard: ratio(tp, tp + fp + fn_),
        vs: 1.0 - if union == 0 { 0.0 } else { fp.abs_diff(fn_) as f64 / union as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask(a: Array3<u8>) -> LabelMask {
        LabelMask::new(a, [1.0; 3]).unwrap()
    }

    #[test]
    fn hand_example() {
        let m = pixel_metrics(&ConfusionCounts { tp: 4, fp: 1, tn: 10, fn_: 1 });
        assert_eq!(m.dsc, 0.8);
        assert_eq!(m.jaccard, 4.0 / 6.0);
        assert_eq!(m.sensitivity, 0.8);
        assert_eq!(m.specificity, 10.0 / 11.0);
        assert_eq!(m.vs, 1.0);
        let empty = pixel_metrics(&ConfusionCounts { tn: 27, ..Default::default() });
        assert_eq!([empty.dsc, empty.sensitivity, empty.precision, empty.specificity, empty.jaccard, empty.vs], [1.0; 6]);
    }

    #[test]
    fn extremes_and_roi() {
        let g = Array3::from_shape_fn((3, 3, 3), |(i, j, k)| u8::from((i + j + k) % 2 == 0));
        let full = AnnotationExtent::full([3, 3, 3]);
        let c = confusion(&mask(g.clone()), &mask(g.clone()), &full).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = g.mapv(|v| 1 - v);
        let c = confusion(&mask(inv), &mask(g.clone()), &full).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let roi = AnnotationExtent::new([0, 0, 0], [1, 1, 2]).unwrap();
        assert_eq!(confusion(&mask(g.clone()), &mask(g.clone()), &roi).unwrap().total(), 2);
        let other = mask(Array3::zeros((3, 3, 2)));
        assert!(confusion(&other, &mask(g), &full).is_err());
    }
}
