use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Outcome of a two-sided Wilcoxon signed-rank test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    /// Pairs with a nonzero difference.
    pub n_nonzero: usize,
    pub w_plus: f64,
    pub p_value: f64,
    /// All differences were zero.
    pub degenerate: bool,
    pub exact: bool,
}

const EXACT_MAX: usize = 25;

/// Ranks of `values` starting at 1, ties receiving their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped. Up to 25 nonzero pairs the null distribution is enumerated
/// exactly (ties handled on doubled ranks); beyond that a tie-corrected
/// normal approximation with continuity correction is used.
pub fn paired_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(invalid("paired samples differ in length"));
    }
    if a.len() < 5 {
        return Err(invalid("paired test needs at least 5 pairs"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite("paired samples".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(PairedTest {
            n: a.len(),
            n_nonzero: 0,
            w_plus: 0.0,
            p_value: 1.0,
            degenerate: true,
            exact: true,
        });
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (p, exact) = if n <= EXACT_MAX {
        // Doubled ranks are integers; count sign assignments per total.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let total = 2f64.powi(n as i32);
        let w2 = (2.0 * w_plus).round() as usize;
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / total;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / total;
        ((2.0 * lower.min(upper)).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
            let t = j as f64;
            var -= (t * t * t - t) / 48.0;
            i += j;
        }
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        ((2.0 * normal_sf(z)).min(1.0), false)
    };
    Ok(PairedTest {
        n: a.len(),
        n_nonzero: n,
        w_plus,
        p_value: p,
        degenerate: false,
        exact,
    })
}

/// Upper tail of the standard normal.
fn normal_sf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}
