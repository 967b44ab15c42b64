//! Evaluation: overlap metrics inside the annotation extent, marching-cubes
//! surfaces, mesh surface error, paired significance tests and reports.

mod distance;
mod marching;
mod mesh;
mod pixel;
mod report;
mod stats;
mod surface;

pub use distance::{brute_force_nearest, point_triangle_distance_sq, TriangleBvh};
pub use mesh::{extract_surface, extract_surface_from, Point, SurfaceMesh};
pub use pixel::{confusion, pixel_metrics, ConfusionCounts, PixelMetrics};
pub use report::{
    evaluate_case, render_csv, render_markdown, CaseReport, Comparison, EvaluationReport, Summary, SurfaceOptions,
    METRICS,
};
pub use stats::{paired_test, PairedTest};
pub use surface::{surface_error, surface_error_with};
