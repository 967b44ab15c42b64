//! Exact point-to-triangle distance and a bounding-volume hierarchy for
//! nearest-triangle queries.

use super::mesh::{dot, sub, Point, SurfaceMesh};

/// Squared distance from `p` to triangle `abc` (closest-feature case split).
pub fn point_triangle_distance_sq(p: Point, [a, b, c]: [Point; 3]) -> f64 {
    let closest = closest_point(p, a, b, c);
    let d = sub(p, closest);
    dot(d, d)
}

fn lerp(a: Point, d: Point, t: f64) -> Point {
    [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]]
}

fn closest_point(p: Point, a: Point, b: Point, c: Point) -> Point {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return lerp(a, ab, d1 / (d1 - d3));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return lerp(a, ac, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return lerp(b, sub(c, b), (d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Point,
    hi: Point,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }

    fn grow(&mut self, p: Point) {
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(p[a]);
            self.hi[a] = self.hi[a].max(p[a]);
        }
    }

    fn dist_sq(&self, p: Point) -> f64 {
        (0..3)
            .map(|a| {
                let d = (self.lo[a] - p[a]).max(0.0).max(p[a] - self.hi[a]);
                d * d
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Median-split BVH over a mesh's triangles.
#[derive(Clone, Debug)]
pub struct TriangleBvh {
    tris: Vec<[Point; 3]>,
    nodes: Vec<Node>,
}

impl TriangleBvh {
    pub fn new(mesh: &SurfaceMesh) -> Self {
        let mut tris: Vec<[Point; 3]> = (0..mesh.triangles().len()).map(|t| mesh.triangle(t)).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            let n = tris.len();
            build(&mut tris, 0, n, &mut nodes);
        }
        Self { tris, nodes }
    }

    pub fn len(&self) -> usize {
        self.tris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Distance from `p` to the nearest triangle; infinite for an empty mesh.
    pub fn nearest_distance(&self, p: Point) -> f64 {
        if self.nodes.is_empty() {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if node.bounds().dist_sq(p) >= best {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for t in &self.tris[start..end] {
                        best = best.min(point_triangle_distance_sq(p, *t));
                    }
                }
                Node::Inner { left, right, .. } => {
                    let (dl, dr) = (self.nodes[left].bounds().dist_sq(p), self.nodes[right].bounds().dist_sq(p));
                    // Visit the closer child first.
                    if dl < dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best.sqrt()
    }
}

fn centroid(t: &[Point; 3]) -> Point {
    [0, 1, 2].map(|a| (t[0][a] + t[1][a] + t[2][a]) / 3.0)
}

fn build(tris: &mut [[Point; 3]], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let mut bounds = Aabb::empty();
    for t in &tris[start..end] {
        t.iter().for_each(|&v| bounds.grow(v));
    }
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return id;
    }
    let ext = [0, 1, 2].map(|a| bounds.hi[a] - bounds.lo[a]);
    let axis = (0..3).max_by(|&a, &b| ext[a].total_cmp(&ext[b])).unwrap_or(0);
    let mid = (start + end) / 2;
    tris[start..end].select_nth_unstable_by(mid - start, |a, b| centroid(a)[axis].total_cmp(&centroid(b)[axis]));
    nodes.push(Node::Leaf { bounds, start, end });
    let left = build(tris, start, mid, nodes);
    let right = build(tris, mid, end, nodes);
    nodes[id] = Node::Inner { bounds, left, right };
    id
}

/// O(V * T) reference used to validate the hierarchy.
pub fn brute_force_nearest(p: Point, mesh: &SurfaceMesh) -> f64 {
    (0..mesh.triangles().len())
        .map(|t| point_triangle_distance_sq(p, mesh.triangle(t)))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}
