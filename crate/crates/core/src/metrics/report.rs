use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mesh::extract_surface;
use super::pixel::{confusion, pixel_metrics, ConfusionCounts};
use super::stats::{paired_test, PairedTest};
use super::surface::surface_error_with;
use crate::error::{invalid, Error, Result};
use crate::par::ExecPolicy;
use crate::volume::{AnnotationExtent, LabelMask};

/// Per-case metric row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub dsc: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub specificity: f64,
    pub jaccard: f64,
    pub vs: f64,
    /// Missing when either cropped mask is empty.
    pub surface_error: Option<f64>,
    pub confusion: ConfusionCounts,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SurfaceOptions {
    pub symmetric: bool,
    pub policy: ExecPolicy,
}

/// Pixel metrics inside `roi` and the surface error between meshes of the
/// roi-cropped masks.
pub fn evaluate_case(
    case_id: &str,
    pred: &LabelMask,
    gt: &LabelMask,
    roi: &AnnotationExtent,
    opts: SurfaceOptions,
) -> Result<CaseReport> {
    let c = confusion(pred, gt, roi)?;
    let m = pixel_metrics(&c);
    let (gc, pc) = (gt.crop(roi), pred.crop(roi));
    let surface = if gc.count() == 0 || pc.count() == 0 {
        log::warn!("case {case_id}: empty mask inside the roi; no surface error");
        None
    } else {
        let (gm, pm) = (extract_surface(&gc)?, extract_surface(&pc)?);
        Some(surface_error_with(&gm, &pm, opts.symmetric, opts.policy)?)
    };
    Ok(CaseReport {
        case_id: case_id.to_string(),
        dsc: m.dsc,
        sensitivity: m.sensitivity,
        precision: m.precision,
        specificity: m.specificity,
        jaccard: m.jaccard,
        vs: m.vs,
        surface_error: surface,
        confusion: c,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Summary {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// Metric keys with their display names, in table order.
pub const METRICS: [(&str, &str); 7] = [
    ("surface_error", "Surface Error (mm)"),
    ("dsc", "DSC"),
    ("sensitivity", "Sensitivity"),
    ("precision", "Precision"),
    ("specificity", "Specificity"),
    ("jaccard", "Jaccard"),
    ("vs", "VS"),
];

impl CaseReport {
    pub fn metric(&self, key: &str) -> Option<f64> {
        match key {
            "surface_error" => self.surface_error,
            "dsc" => Some(self.dsc),
            "sensitivity" => Some(self.sensitivity),
            "precision" => Some(self.precision),
            "specificity" => Some(self.specificity),
            "jaccard" => Some(self.jaccard),
            "vs" => Some(self.vs),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub test: PairedTest,
}

/// A named set of case rows with aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub name: String,
    pub cases: Vec<CaseReport>,
    pub summary: BTreeMap<String, Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

impl EvaluationReport {
    pub fn new(name: &str, cases: Vec<CaseReport>) -> Self {
        let summary = METRICS
            .iter()
            .filter_map(|(k, _)| {
                let vals: Vec<f64> = cases.iter().filter_map(|c| c.metric(k)).collect();
                Summary::of(&vals).map(|s| (k.to_string(), s))
            })
            .collect();
        Self {
            name: name.to_string(),
            cases,
            summary,
            comparison: None,
        }
    }

    /// Paired signed-rank test on surface errors of cases present in both.
    pub fn compare_with(&mut self, baseline: &EvaluationReport) -> Result<PairedTest> {
        let base: BTreeMap<&str, f64> = baseline
            .cases
            .iter()
            .filter_map(|c| c.surface_error.map(|e| (c.case_id.as_str(), e)))
            .collect();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for c in &self.cases {
            if let (Some(e), Some(&be)) = (c.surface_error, base.get(c.case_id.as_str())) {
                a.push(be);
                b.push(e);
            }
        }
        let test = paired_test(&a, &b)?;
        self.comparison = Some(Comparison {
            baseline: baseline.name.clone(),
            test,
        });
        Ok(test)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn cell(s: Option<&Summary>) -> String {
    s.map_or_else(|| "n/a".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std))
}

/// Table with one row per metric and one `mean ± std` column per report.
pub fn render_markdown(reports: &[EvaluationReport]) -> String {
    let mut out = String::from("| Metric |");
    for r in reports {
        out.push_str(&format!(" {} |", r.name));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(reports.len()));
    out.push('\n');
    for (key, label) in METRICS {
        out.push_str(&format!("| {label} |"));
        for r in reports {
            out.push_str(&format!(" {} |", cell(r.summary.get(key))));
        }
        out.push('\n');
    }
    if reports.iter().any(|r| r.comparison.is_some()) {
        out.push_str("| p-value (surface error) |");
        for r in reports {
            let v = r
                .comparison
                .as_ref()
                .map_or_else(|| "-".to_string(), |c| format!("{:.4} vs {}", c.test.p_value, c.baseline));
            out.push_str(&format!(" {v} |"));
        }
        out.push('\n');
    }
    out
}

/// Long-format CSV: `report,metric,mean,std,n`.
pub fn render_csv(reports: &[EvaluationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| invalid(format!("csv: {e}"));
    w.write_record(["report", "metric", "mean", "std", "n"]).map_err(err)?;
    for r in reports {
        for (key, _) in METRICS {
            if let Some(s) = r.summary.get(key) {
                w.write_record([r.name.clone(), key.to_string(), s.mean.to_string(), s.std.to_string(), s.n.to_string()])
                    .map_err(err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| invalid(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sphere(n: usize, r: f64) -> Array3<u8> {
        let c = (n as f64 - 1.0) / 2.0;
        Array3::from_shape_fn((n, n, n), |(i, j, k)| {
            let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt();
            u8::from(d <= r)
        })
    }

    fn row(id: &str, se: f64, dsc: f64) -> CaseReport {
        CaseReport {
            case_id: id.into(),
            dsc,
            sensitivity: 1.0,
            precision: 1.0,
            specificity: 1.0,
            jaccard: dsc / (2.0 - dsc),
            vs: 1.0,
            surface_error: Some(se),
            confusion: ConfusionCounts::default(),
        }
    }

    #[test]
    fn perfect_and_dilated() {
        let s = 0.35;
        let g = LabelMask::new(sphere(24, 7.0), [s; 3]).unwrap();
        let roi = AnnotationExtent::full(g.shape());
        let r = evaluate_case("a", &g, &g, &roi, SurfaceOptions::default()).unwrap();
        assert_eq!((r.dsc, r.sensitivity, r.surface_error), (1.0, 1.0, Some(0.0)));
        let p = g.dilate6();
        let r = evaluate_case("a", &p, &g, &roi, SurfaceOptions::default()).unwrap();
        assert_eq!(r.sensitivity, 1.0);
        assert!(r.precision < 1.0);
        let se = r.surface_error.unwrap();
        assert!(se > 0.5 * s && se < 1.5 * s, "{se}");
        let empty = LabelMask::zeros(g.shape(), [s; 3]).unwrap();
        assert_eq!(evaluate_case("a", &empty, &g, &roi, SurfaceOptions::default()).unwrap().surface_error, None);
    }

    #[test]
    fn aggregate_and_render() {
        let rows = vec![row("a", 0.1, 0.8), row("b", 0.3, 0.9), row("c", 0.2, 0.7)];
        let rep = EvaluationReport::new("ours", rows);
        let s = rep.summary["surface_error"];
        assert!((s.mean - 0.2).abs() < 1e-15);
        assert!((s.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-15);
        let md = render_markdown(std::slice::from_ref(&rep));
        assert!(md.contains("| Surface Error (mm) | 0.2000 ± 0.0816 |"));
        assert_eq!(md.lines().count(), 2 + METRICS.len());
        let csv = render_csv(std::slice::from_ref(&rep)).unwrap();
        assert!(csv.starts_with("report,metric,mean,std,n\n"));
        assert_eq!(csv.lines().count(), 1 + METRICS.len());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        rep.save(&p).unwrap();
        assert_eq!(EvaluationReport::load(&p).unwrap(), rep);
    }

    #[test]
    fn comparison_pairs_by_case() {
        let ids = ["a", "b", "c", "d", "e", "f"];
        let base = EvaluationReport::new("base", ids.iter().enumerate().map(|(i, id)| row(id, 1.0 + i as f64, 0.5)).collect());
        let mut ours = EvaluationReport::new("ours", ids.iter().rev().enumerate().map(|(i, id)| row(id, 0.5 + (5 - i) as f64, 0.5)).collect());
        let t = ours.compare_with(&base).unwrap();
        assert_eq!(t.p_value, 2.0 / 64.0);
        assert!(render_markdown(&[base, ours]).contains("p-value"));
    }
}
