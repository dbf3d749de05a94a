//! Ray casting against a triangle mesh: Möller–Trumbore intersection behind a
//! median-split bounding volume hierarchy.

use nalgebra::Vector3;

use super::mesh::TriangleMesh;

/// Determinant cutoff below which a ray is treated as parallel to a triangle.
pub const DET_EPSILON: f64 = 1e-9;
/// Hits closer than this along the ray parameter are discarded.
pub const NEAR_CLIP: f64 = 1e-6;

const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter of the intersection.
    pub t: f64,
    pub triangle: usize,
    /// Barycentric weights of the second and third vertex.
    pub u: f64,
    pub v: f64,
}

impl Hit {
    /// Strict ordering used to pick among candidate hits: nearer first, then
    /// lower triangle index, so every traversal order agrees.
    fn better_than(&self, other: &Hit) -> bool {
        self.t < other.t || (self.t == other.t && self.triangle < other.triangle)
    }
}

/// Möller–Trumbore ray/triangle test. Back faces count as hits.
pub fn intersect_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    tri: &[Vector3<f64>; 3],
) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < DET_EPSILON {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t >= NEAR_CLIP).then_some((t, u, v))
}

/// Reference closest-hit query testing every triangle.
pub fn brute_force_hit(mesh: &TriangleMesh, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for i in 0..mesh.triangles().len() {
        if let Some((t, u, v)) = intersect_triangle(origin, dir, &mesh.triangle(i)) {
            let hit = Hit { t, triangle: i, u, v };
            if best.is_none_or(|b| hit.better_than(&b)) {
                best = Some(hit);
            }
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vector3::repeat(f64::INFINITY),
            hi: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    /// Entry parameter of the slab test, or `None` when the ray misses or the
    /// box lies entirely beyond `t_max`.
    fn entry(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0: f64 = 0.0;
        let mut t1 = t_max;
        for a in 0..3 {
            let (mut near, mut far) = (
                (self.lo[a] - origin[a]) * inv_dir[a],
                (self.hi[a] - origin[a]) * inv_dir[a],
            );
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            // NaN arises for a zero direction component with the origin on a
            // slab plane; such an axis does not constrain the interval.
            if near.is_nan() || far.is_nan() {
                continue;
            }
            // Pad by a relative margin so boundary hits are never culled.
            let pad = 1e-9 * (1.0 + near.abs().max(far.abs()));
            t0 = t0.max(near - pad);
            t1 = t1.min(far + pad);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
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

/// Bounding volume hierarchy over a mesh's triangles.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    tris: Vec<[Vector3<f64>; 3]>,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let tris: Vec<[Vector3<f64>; 3]> = (0..mesh.triangles().len()).map(|i| mesh.triangle(i)).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let centroids: Vec<Vector3<f64>> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut bvh = Self {
            nodes: Vec::new(),
            order: Vec::new(),
            tris,
        };
        if !order.is_empty() {
            let n = order.len();
            bvh.build_node(&mut order, 0, n, &centroids);
        }
        bvh.order = order;
        bvh
    }

    fn build_node(&mut self, order: &mut [usize], start: usize, end: usize, centroids: &[Vector3<f64>]) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &i in &order[start..end] {
            for p in &self.tris[i] {
                bounds.grow(p);
            }
            cbounds.grow(&centroids[i]);
        }
        let idx = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bounds, start, end });
            return idx;
        }
        let extent = cbounds.hi - cbounds.lo;
        let axis = extent.imax();
        if extent[axis] <= 0.0 {
            self.nodes.push(Node::Leaf { bounds, start, end });
            return idx;
        }
        let mid = start + (end - start) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |a, b| {
            centroids[*a][axis]
                .total_cmp(&centroids[*b][axis])
                .then(a.cmp(b))
        });
        self.nodes.push(Node::Leaf { bounds, start, end });
        let left = self.build_node(order, start, mid, centroids);
        let right = self.build_node(order, mid, end, centroids);
        self.nodes[idx] = Node::Inner { bounds, left, right };
        idx
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Closest hit along `origin + t·dir` with `t >= NEAR_CLIP`.
    pub fn closest_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv_dir = dir.map(|d| 1.0 / d);
        let mut best: Option<Hit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let t_max = best.map_or(f64::INFINITY, |b| b.t);
            let node = &self.nodes[n];
            if node.bounds().entry(origin, &inv_dir, t_max).is_none() {
                continue;
            }
            match node {
                Node::Leaf { start, end, .. } => {
                    for &tri in &self.order[*start..*end] {
                        if let Some((t, u, v)) = intersect_triangle(origin, dir, &self.tris[tri]) {
                            let hit = Hit { t, triangle: tri, u, v };
                            if best.is_none_or(|b| hit.better_than(&b)) {
                                best = Some(hit);
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(*right);
                    stack.push(*left);
                }
            }
        }
        best
    }

    /// Whether any triangle is hit at a parameter in `[NEAR_CLIP, t_max)`.
    pub fn occluded(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> bool {
        self.closest_hit(origin, dir).is_some_and(|h| h.t < t_max)
    }
}
