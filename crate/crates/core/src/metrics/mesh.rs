use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;

use super::marching::marching_cubes;
use crate::error::{invalid, Error, Result};
use crate::volume::LabelMask;

pub type Point = [f64; 3];

/// Indexed triangle mesh in physical (mm) coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceMesh {
    vertices: Vec<Point>,
    triangles: Vec<[u32; 3]>,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<Point>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if triangles.iter().flatten().any(|&i| i >= n) {
            return Err(invalid("triangle index out of range"));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mesh vertices".into()));
        }
        Ok(Self { vertices, triangles })
    }

    pub(crate) fn new_unchecked(vertices: Vec<Point>, triangles: Vec<[u32; 3]>) -> Self {
        Self { vertices, triangles }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Point; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                0.5 * norm(cross(sub(b, a), sub(c, a)))
            })
            .sum()
    }

    /// Enclosed volume; positive when normals point outward.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Every directed edge appears once and its reverse once.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<(u32, u32), i32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *count.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        !self.triangles.is_empty()
            && count
                .iter()
                .all(|(&(a, b), &n)| n == 1 && count.get(&(b, a)) == Some(&1))
    }

    pub fn bounding_box(&self) -> Option<(Point, Point)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            ([0, 1, 2].map(|a| lo[a].min(v[a])), [0, 1, 2].map(|a| hi[a].max(v[a])))
        }))
    }

    /// Apply `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(Point) -> Point) -> SurfaceMesh {
        Self {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn to_stl(&self, name: &str) -> String {
        let mut s = format!("solid {name}\n");
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(t);
            let n = cross(sub(b, a), sub(c, a));
            let l = norm(n);
            let n = if l > 0.0 { n.map(|v| v / l) } else { n };
            let _ = writeln!(s, "  facet normal {:e} {:e} {:e}", n[0], n[1], n[2]);
            s.push_str("    outer loop\n");
            for v in [a, b, c] {
                let _ = writeln!(s, "      vertex {:e} {:e} {:e}", v[0], v[1], v[2]);
            }
            s.push_str("    endloop\n  endfacet\n");
        }
        let _ = writeln!(s, "endsolid {name}");
        s
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    /// Write ASCII STL or OBJ, chosen by extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("stl") => self.to_stl(path.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh")),
            Some("obj") => self.to_obj(),
            _ => return Err(invalid(format!("unknown mesh format: {}", path.display()))),
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Marching-cubes surface of a binary mask at level 0.5.
pub fn extract_surface(mask: &LabelMask) -> Result<SurfaceMesh> {
    extract_surface_from(mask.data(), mask.spacing(), mask.origin())
}

pub fn extract_surface_from(mask: &Array3<u8>, spacing: [f64; 3], origin: [f64; 3]) -> Result<SurfaceMesh> {
    if !mask.iter().any(|&v| v != 0) {
        return Err(Error::EmptyMask);
    }
    let field = mask.mapv(|v| if v != 0 { 1.0f32 } else { 0.0 });
    Ok(marching_cubes(&field, 0.5, 0.0, spacing, origin))
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    #[test]
    fn single_voxel() {
        let mut m = Array3::<u8>::zeros((3, 3, 3));
        m[[1, 1, 1]] = 1;
        let mesh = extract_surface_from(&m, [1.0; 3], [0.0; 3]).unwrap();
        assert!(mesh.is_watertight());
        assert!(mesh.signed_volume() > 0.0);
        let (lo, hi) = mesh.bounding_box().unwrap();
        for a in 0..3 {
            assert!(hi[a] - lo[a] <= 1.0 + 1e-12);
            assert!(lo[a] < 1.0 && hi[a] > 1.0);
        }
        // Octahedron with vertices at the six face-adjacent edge midpoints.
        assert_eq!(mesh.vertices().len(), 6);
        assert!(extract_surface_from(&Array3::zeros((2, 2, 2)), [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn cube_area_close_to_analytic() {
        let s = 0.1;
        let mut m = Array3::<u8>::zeros((12, 12, 12));
        m.slice_mut(ndarray::s![1..11, 1..11, 1..11]).fill(1);
        let mesh = extract_surface_from(&m, [s; 3], [0.0; 3]).unwrap();
        let analytic = 6.0 * (10.0 * s) * (10.0 * s);
        assert!((mesh.area() - analytic).abs() / analytic < 0.15, "{}", mesh.area());
        assert!(mesh.is_watertight());
    }

    #[test]
    fn rotation_gives_congruent_vertex_set() {
        let mut m = Array3::<u8>::zeros((5, 6, 7));
        for (i, j, k) in [(1, 1, 1), (1, 2, 1), (2, 2, 3), (3, 4, 5), (2, 3, 3)] {
            m[[i, j, k]] = 1;
        }
        let a = extract_surface_from(&m, [1.0; 3], [0.0; 3]).unwrap();
        // Quarter turn in the (1,2) plane: (i, j, k) -> (i, k, 5 - j).
        let mut r = m.view();
        r.swap_axes(1, 2);
        r.invert_axis(Axis(2));
        let b = extract_surface_from(&r.to_owned(), [1.0; 3], [0.0; 3]).unwrap();
        let mut va: Vec<[i64; 3]> = a
            .vertices()
            .iter()
            .map(|v| [v[0], v[2], 5.0 - v[1]].map(|x| (x * 1e6).round() as i64))
            .collect();
        let mut vb: Vec<[i64; 3]> = b.vertices().iter().map(|v| v.map(|x| (x * 1e6).round() as i64)).collect();
        va.sort();
        vb.sort();
        assert_eq!(va, vb);
        assert!((a.area() - b.area()).abs() < 1e-9);
    }

    #[test]
    fn exports() {
        let mut m = Array3::<u8>::zeros((2, 2, 2));
        m[[0, 0, 0]] = 1;
        let mesh = extract_surface_from(&m, [1.0; 3], [0.0; 3]).unwrap();
        let stl = mesh.to_stl("x");
        assert_eq!(stl.matches("facet normal").count(), mesh.triangles().len());
        let obj = mesh.to_obj();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), mesh.vertices().len());
        let dir = tempfile::tempdir().unwrap();
        mesh.save(&dir.path().join("a.obj")).unwrap();
        mesh.save(&dir.path().join("a.stl")).unwrap();
        assert!(mesh.save(&dir.path().join("a.ply")).is_err());
    }
}
