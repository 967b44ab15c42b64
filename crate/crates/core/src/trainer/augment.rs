use ndarray::{Array3, Axis};
use rand::Rng;

use crate::preprocess::Patch;

/// One draw of axis flips followed by quarter turns in the three
/// axis-aligned planes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flips: [bool; 3],
    /// Quarter turns in the planes (1,2), (0,2), (0,1).
    pub turns: [u8; 3],
}

const PLANES: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];

impl AugmentDraw {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flips: [rng.random(), rng.random(), rng.random()],
            turns: [rng.random_range(0..4), rng.random_range(0..4), rng.random_range(0..4)],
        }
    }

    pub fn apply<T: Clone>(&self, a: &Array3<T>) -> Array3<T> {
        let mut v = a.view();
        for (ax, &f) in self.flips.iter().enumerate() {
            if f {
                v.invert_axis(Axis(ax));
            }
        }
        for (&(p, q), &k) in PLANES.iter().zip(&self.turns) {
            for _ in 0..k {
                // Quarter turn: swap the two plane axes, then mirror one.
                v.swap_axes(p, q);
                v.invert_axis(Axis(p));
            }
        }
        v.as_standard_layout().into_owned()
    }
}

/// Apply a random draw identically to image, vessel-like twin and mask.
pub fn augment(patch: &Patch, rng: &mut impl Rng) -> Patch {
    augment_with(patch, &AugmentDraw::sample(rng))
}

pub fn augment_with(patch: &Patch, draw: &AugmentDraw) -> Patch {
    Patch {
        image: draw.apply(&patch.image),
        vessel_like: draw.apply(&patch.vessel_like),
        mask: patch.mask.as_ref().map(|m| draw.apply(m)),
        grid_origin: patch.grid_origin,
        group: patch.group,
    }
}
