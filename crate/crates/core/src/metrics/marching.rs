//! Marching cubes with a case table derived at first use.
//!
//! For each of the 256 corner configurations the crossing points on the cube
//! faces are joined into oriented loops (the boundary of the foreground part
//! of the cube surface) and each loop is fan-triangulated. Faces with two
//! diagonal foreground corners keep those corners separated. The rule only
//! looks at one face, so neighbouring cubes agree and meshes are watertight.

use std::collections::HashMap;
use std::sync::OnceLock;

use ndarray::Array3;

use super::mesh::SurfaceMesh;

/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as `(low corner, axis)`.
fn edges() -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(12);
    for axis in 0..3 {
        for c in 0..8 {
            if c & (1 << axis) == 0 {
                v.push((c, axis));
            }
        }
    }
    v
}

fn edge_id(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    edges().iter().position(|&e| e == (lo, axis)).expect("cube edge")
}

type Table = Vec<Vec<[u8; 3]>>;

fn build_table() -> Table {
    let pos = |c: usize| corner_offset(c).map(|v| v as f64);
    let mid = |e: usize| {
        let (c, axis) = edges()[e];
        let mut p = pos(c);
        p[axis] += 0.5;
        p
    };
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];

    (0..256usize)
        .map(|config| {
            let inside = |c: usize| config & (1 << c) != 0;
            // next[e] = edge reached from crossing e along the oriented loop.
            let mut next = [usize::MAX; 12];
            for axis in 0..3 {
                let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
                for side in 0..2 {
                    let mut normal = [0.0; 3];
                    normal[axis] = if side == 1 { 1.0 } else { -1.0 };
                    let ring: Vec<usize> = [(0, 0), (1, 0), (1, 1), (0, 1)]
                        .iter()
                        .map(|&(u, v)| (side << axis) | (u << b) | (v << c))
                        .collect();
                    let crossing: Vec<usize> = (0..4).filter(|&i| inside(ring[i]) != inside(ring[(i + 1) % 4])).collect();
                    // Pair crossings so each segment cuts off one inside corner
                    // (corner k lies between ring edges k-1 and k).
                    let mut segs: Vec<(usize, usize, usize)> = Vec::new();
                    match crossing.len() {
                        0 => {}
                        2 => {
                            let (i, j) = (crossing[0], crossing[1]);
                            let corner = (0..4).find(|&k| inside(ring[k])).expect("inside corner");
                            segs.push((i, j, ring[corner]));
                        }
                        4 => {
                            for k in (0..4).filter(|&k| inside(ring[k])) {
                                segs.push(((k + 3) % 4, k, ring[k]));
                            }
                        }
                        _ => unreachable!("odd number of crossings on a face"),
                    }
                    for (i, j, corner) in segs {
                        let ei = edge_id(ring[i], ring[(i + 1) % 4]);
                        let ej = edge_id(ring[j], ring[(j + 1) % 4]);
                        let (p, q) = (mid(ei), mid(ej));
                        // Inside corner on the left when seen from outside.
                        let left = dot(cross(sub(q, p), sub(pos(corner), p)), normal) > 0.0;
                        let (from, to) = if left { (ei, ej) } else { (ej, ei) };
                        debug_assert_eq!(next[from], usize::MAX);
                        next[from] = to;
                    }
                }
            }
            let mut tris = Vec::new();
            let mut seen = [false; 12];
            for start in 0..12 {
                if next[start] == usize::MAX || seen[start] {
                    continue;
                }
                let mut lp = vec![start];
                seen[start] = true;
                let mut e = next[start];
                while e != start {
                    seen[e] = true;
                    lp.push(e);
                    e = next[e];
                }
                // Reverse the fan so normals point from foreground to background.
                for t in 1..lp.len() - 1 {
                    tris.push([lp[0] as u8, lp[t + 1] as u8, lp[t] as u8]);
                }
            }
            tris
        })
        .collect()
}

fn table() -> &'static Table {
    static TABLE: OnceLock<Table> = OnceLock::new();
    TABLE.get_or_init(build_table)
}

/// Iso-surface of `field` at `level`. Samples outside the array read as
/// `pad` (below `level`), so surfaces are closed. Vertex positions are
/// `origin + index * spacing`.
pub(crate) fn marching_cubes(field: &Array3<f32>, level: f32, pad: f32, spacing: [f64; 3], origin: [f64; 3]) -> SurfaceMesh {
    debug_assert!(pad <= level);
    let sh = field.shape();
    let (d, h, w) = (sh[0] as isize, sh[1] as isize, sh[2] as isize);
    let val = |i: isize, j: isize, k: isize| -> f32 {
        if i < 0 || j < 0 || k < 0 || i >= d || j >= h || k >= w {
            pad
        } else {
            field[[i as usize, j as usize, k as usize]]
        }
    };
    let edge_list = edges();
    let table = table();
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut index: HashMap<([isize; 3], usize), u32> = HashMap::new();
    // Cubes span the padded range so the zero border closes the surface.
    for i in -1..d {
        for j in -1..h {
            for k in -1..w {
                let mut config = 0usize;
                let mut vals = [0f32; 8];
                for (c, v) in vals.iter_mut().enumerate() {
                    let o = corner_offset(c);
                    *v = val(i + o[0] as isize, j + o[1] as isize, k + o[2] as isize);
                    if *v > level {
                        config |= 1 << c;
                    }
                }
                let tris = &table[config];
                if tris.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for t in tris {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in ids.iter_mut().zip(t) {
                        let e = e as usize;
                        if local[e] == u32::MAX {
                            let (c, axis) = edge_list[e];
                            let o = corner_offset(c);
                            let base = [i + o[0] as isize, j + o[1] as isize, k + o[2] as isize];
                            local[e] = *index.entry((base, axis)).or_insert_with(|| {
                                let (v0, v1) = (vals[c], vals[c | (1 << axis)]);
                                let t = interp(v0, v1, level);
                                let mut p = [0f64; 3];
                                for a in 0..3 {
                                    let idx = base[a] as f64 + if a == axis { t } else { 0.0 };
                                    p[a] = origin[a] + idx * spacing[a];
                                }
                                vertices.push(p);
                                (vertices.len() - 1) as u32
                            });
                        }
                        *slot = local[e];
                    }
                    triangles.push(ids);
                }
            }
        }
    }
    SurfaceMesh::new_unchecked(vertices, triangles)
}

/// Crossing parameter of `level` between samples `v0` and `v1`.
fn interp(v0: f32, v1: f32, level: f32) -> f64 {
    let (a, b) = (f64::from(v0), f64::from(v1));
    ((f64::from(level) - a) / (b - a)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_complementary_in_size() {
        let t = table();
        assert!(t[0].is_empty() && t[255].is_empty());
        assert_eq!(t[1].len(), 1);
        for c in 0..256 {
            assert!(t[c].len() <= 12);
        }
    }

    #[test]
    fn every_config_closes_when_embedded() {
        // A 2x2x2 block with an arbitrary corner pattern yields a closed,
        // consistently oriented surface.
        for config in 1..256usize {
            let field = Array3::from_shape_fn((2, 2, 2), |(i, j, k)| {
                let c = i | (j << 1) | (k << 2);
                if config & (1 << c) != 0 { 1.0 } else { 0.0 }
            });
            let m = marching_cubes(&field, 0.5, 0.0, [1.0; 3], [0.0; 3]);
            assert!(m.is_watertight(), "config {config}");
            assert!(m.signed_volume() > 0.0, "config {config}");
        }
    }
}
