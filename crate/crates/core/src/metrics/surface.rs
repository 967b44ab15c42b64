use super::distance::TriangleBvh;
use super::mesh::SurfaceMesh;
use crate::error::{invalid, Result};
use crate::par::{self, ExecPolicy};

const VERTEX_CHUNK: usize = 1024;

fn directed(from: &SurfaceMesh, to: &SurfaceMesh, policy: ExecPolicy) -> f64 {
    let bvh = TriangleBvh::new(to);
    let verts = from.vertices();
    let chunks = verts.len().div_ceil(VERTEX_CHUNK);
    let sums = par::map_range(policy, chunks, |c| {
        let end = ((c + 1) * VERTEX_CHUNK).min(verts.len());
        verts[c * VERTEX_CHUNK..end].iter().map(|&v| bvh.nearest_distance(v)).sum::<f64>()
    });
    sums.iter().sum::<f64>() / verts.len() as f64
}

/// Mean distance from each ground-truth vertex to the nearest predicted
/// triangle, in mm.
pub fn surface_error(gt: &SurfaceMesh, pred: &SurfaceMesh) -> Result<f64> {
    surface_error_with(gt, pred, false, ExecPolicy::default())
}

/// `symmetric` averages the two directed errors.
pub fn surface_error_with(gt: &SurfaceMesh, pred: &SurfaceMesh, symmetric: bool, policy: ExecPolicy) -> Result<f64> {
    if gt.is_empty() || pred.is_empty() {
        return Err(invalid("surface error needs two non-empty meshes"));
    }
    let forward = directed(gt, pred, policy);
    Ok(if symmetric {
        0.5 * (forward + directed(pred, gt, policy))
    } else {
        forward
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::distance::brute_force_nearest;
    use crate::metrics::mesh::extract_surface_from;
    use ndarray::Array3;

    fn plate(z: f64) -> SurfaceMesh {
        // 10 x 10 mm plate from two triangles, plus a vertex grid so the
        // ground-truth points are spread over the plate.
        let n = 11;
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push([i as f64, j as f64, z]);
            }
        }
        let mut t = Vec::new();
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let a = (i * n + j) as u32;
                t.push([a, a + n as u32, a + 1]);
                t.push([a + 1, a + n as u32, a + n as u32 + 1]);
            }
        }
        SurfaceMesh::new(v, t).unwrap()
    }

    #[test]
    fn plates_and_identity() {
        let a = plate(0.0);
        assert_eq!(surface_error(&a, &a).unwrap(), 0.0);
        assert!((surface_error(&a, &plate(0.35)).unwrap() - 0.35).abs() < 1e-12);
        assert!(surface_error(&a, &SurfaceMesh::default()).is_err());
    }

    #[test]
    fn sequential_and_parallel_agree_with_brute_force() {
        let mut m = Array3::<u8>::zeros((10, 10, 10));
        m.slice_mut(ndarray::s![2..7, 3..8, 2..6]).fill(1);
        let mut n = m.clone();
        n.slice_mut(ndarray::s![2..8, 3..8, 2..7]).fill(1);
        let a = extract_surface_from(&m, [0.5; 3], [0.0; 3]).unwrap();
        let b = extract_surface_from(&n, [0.5; 3], [0.0; 3]).unwrap();
        let s = surface_error_with(&a, &b, false, ExecPolicy::Sequential).unwrap();
        let p = surface_error_with(&a, &b, false, ExecPolicy::Parallel).unwrap();
        assert_eq!(s, p);
        let brute = a.vertices().iter().map(|&v| brute_force_nearest(v, &b)).sum::<f64>() / a.vertices().len() as f64;
        assert!((s - brute).abs() < 1e-12);
        let sym = surface_error_with(&a, &b, true, ExecPolicy::Sequential).unwrap();
        assert!(sym > 0.0);
    }
}
