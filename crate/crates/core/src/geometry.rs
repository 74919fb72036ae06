//! Point-cloud primitives, rigid transforms, and exact nearest-neighbor
//! queries.
//!
//! Everything here is immutable after construction and safe to share across
//! worker threads. Nearest-neighbor search is exact (k-d tree with brute-force
//! leaf buckets); distance ties break by smaller point index so downstream
//! losses are deterministic.

use crate::{Error, Result};

/// A 3D point or vector in meters.
pub type Point3 = [f64; 3];

pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

/// Squared Euclidean distance. All neighbor queries and their oracles share
/// this helper so comparisons are bitwise.
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// An unordered set of 3D points (a LiDAR frame).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "point {i} has non-finite coordinate"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            c = add(c, *p);
        }
        if self.points.is_empty() {
            c
        } else {
            scale(c, 1.0 / self.points.len() as f64)
        }
    }
}

/// Per-source-point 3D motion vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Vec<Point3>,
}

impl FlowField {
    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// A proper rigid motion: rotation then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

const ORTHO_TOL: f64 = 1e-9;

impl RigidTransform {
    /// Validates that `rotation` is orthonormal with determinant +1
    /// (within 1e-9).
    pub fn new(rotation: [[f64; 3]; 3], translation: Point3) -> Result<Self> {
        let r = rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut rrt = 0.0;
                for (k, row) in r.iter().enumerate() {
                    let _ = k;
                    rrt += row[i] * row[j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rrt - expect).abs() > ORTHO_TOL {
                    return Err(Error::InvalidInput(format!(
                        "rotation is not orthonormal: (R^T R)[{i}][{j}] = {rrt}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidInput(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: Point3) -> Self {
        Self {
            rotation: Self::identity().rotation,
            translation: t,
        }
    }

    /// Rotation by `angle` radians about the +z axis through the origin.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rodrigues rotation about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Point3, angle: f64) -> Self {
        let n = norm(axis);
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let u = scale(axis, 1.0 / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let rotation = [
            [
                c + u[0] * u[0] * t,
                u[0] * u[1] * t - u[2] * s,
                u[0] * u[2] * t + u[1] * s,
            ],
            [
                u[1] * u[0] * t + u[2] * s,
                c + u[1] * u[1] * t,
                u[1] * u[2] * t - u[0] * s,
            ],
            [
                u[2] * u[0] * t - u[1] * s,
                u[2] * u[1] * t + u[0] * s,
                c + u[2] * u[2] * t,
            ],
        ];
        Self {
            rotation,
            translation: [0.0; 3],
        }
    }

    /// The motion that rotates about `center` (instead of the origin) and then
    /// translates by `t`: p -> R (p - center) + center + t.
    pub fn about_point(rotation: Self, center: Point3, t: Point3) -> Self {
        let rc = rotation.apply_rotation(center);
        Self {
            rotation: rotation.rotation,
            translation: add(sub(center, rc), t),
        }
    }

    fn apply_rotation(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        add(self.apply_rotation(p), self.translation)
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let inv = Self {
            rotation: rt,
            translation: [0.0; 3],
        };
        let t = inv.apply_rotation(self.translation);
        Self {
            rotation: rt,
            translation: scale(t, -1.0),
        }
    }

    /// self ∘ other: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rotation[i][j] += self.rotation[i][k] * other.rotation[k][j];
                }
            }
        }
        Self {
            rotation,
            translation: self.apply(other.translation),
        }
    }
}

/// Applies a rigid transform to every point of a cloud.
pub fn apply_rigid(t: &RigidTransform, c: &PointCloud) -> PointCloud {
    PointCloud {
        points: c.iter().map(|p| t.apply(*p)).collect(),
    }
}

/// The flow field induced by a rigid motion: f_a = T(p_a) - p_a.
pub fn flow_from_rigid(t: &RigidTransform, c: &PointCloud) -> FlowField {
    FlowField {
        vectors: c.iter().map(|p| sub(t.apply(*p), *p)).collect(),
    }
}

/// Keeps points with z strictly above the threshold, preserving order.
pub fn remove_ground(c: &PointCloud, z_threshold: f64) -> PointCloud {
    PointCloud {
        points: c.iter().copied().filter(|p| p[2] > z_threshold).collect(),
    }
}

/// k-nearest-neighbor results: per query, indices into the reference cloud
/// and squared distances, both sorted ascending (ties by smaller index).
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    pub indices: Vec<Vec<usize>>,
    pub dist2: Vec<Vec<f64>>,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Exact k nearest neighbors of each query point in `reference`.
///
/// If `k` exceeds the reference size, all reference points are returned.
pub fn knn(reference: &PointCloud, queries: &PointCloud, k: usize) -> Result<NeighborIndex> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("empty reference cloud".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let tree = KdTree::build(reference.points());
    let k_eff = k.min(reference.len());
    let mut indices = Vec::with_capacity(queries.len());
    let mut dists = Vec::with_capacity(queries.len());
    for q in queries.iter() {
        let found = tree.knn(*q, k_eff);
        let (idx, d2): (Vec<usize>, Vec<f64>) = found.into_iter().unzip();
        indices.push(idx);
        dists.push(d2);
    }
    Ok(NeighborIndex {
        indices,
        dist2: dists,
    })
}

/// k nearest neighbors of each cloud point within the same cloud, excluding
/// the point itself. Points get fewer than k neighbors only when the cloud
/// has fewer than k+1 points.
pub fn knn_excluding_self(cloud: &PointCloud, k: usize) -> Result<NeighborIndex> {
    let raw = knn(cloud, cloud, k + 1)?;
    let mut indices = Vec::with_capacity(cloud.len());
    let mut dists = Vec::with_capacity(cloud.len());
    for (i, (idx, d2)) in raw.indices.iter().zip(raw.dist2.iter()).enumerate() {
        let mut keep_i = Vec::with_capacity(k);
        let mut keep_d = Vec::with_capacity(k);
        for (j, d) in idx.iter().zip(d2.iter()) {
            if *j != i && keep_i.len() < k {
                keep_i.push(*j);
                keep_d.push(*d);
            }
        }
        indices.push(keep_i);
        dists.push(keep_d);
    }
    Ok(NeighborIndex {
        indices,
        dist2: dists,
    })
}

const LEAF_SIZE: usize = 16;

enum KdNode {
    Leaf {
        start: usize,
        len: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact k-d tree over a borrowed point slice. Split planes come from the
/// median along the widest axis; equal coordinates are ordered by point index
/// so the structure (and every query) is deterministic.
struct KdTree<'a> {
    pts: &'a [Point3],
    order: Vec<usize>,
    nodes: Vec<KdNode>,
    root: usize,
}

impl<'a> KdTree<'a> {
    fn build(pts: &'a [Point3]) -> Self {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut nodes = Vec::new();
        let root = Self::build_rec(pts, &mut order, 0, pts.len(), &mut nodes);
        Self {
            pts,
            order,
            nodes,
            root,
        }
    }

    fn build_rec(
        pts: &[Point3],
        order: &mut [usize],
        start: usize,
        len: usize,
        nodes: &mut Vec<KdNode>,
    ) -> usize {
        if len <= LEAF_SIZE {
            nodes.push(KdNode::Leaf { start, len });
            return nodes.len() - 1;
        }
        let slice = &mut order[start..start + len];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(pts[i][a]);
                hi[a] = hi[a].max(pts[i][a]);
            }
        }
        let mut axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] {
                axis = a;
            }
        }
        let mid = len / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            (pts[a][axis], a)
                .partial_cmp(&(pts[b][axis], b))
                .expect("finite coordinates")
        });
        let value = pts[slice[mid]][axis];
        let left = Self::build_rec(pts, order, start, mid, nodes);
        let right = Self::build_rec(pts, order, start + mid, len - mid, nodes);
        nodes.push(KdNode::Split {
            axis,
            value,
            left,
            right,
        });
        nodes.len() - 1
    }

    /// Returns the k nearest (index, squared distance) pairs sorted ascending
    /// by (distance, index).
    fn knn(&self, q: Point3, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(self.root, q, k, &mut best);
        best.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        best.into_iter().map(|(d2, i)| (i, d2)).collect()
    }

    fn search(&self, node: usize, q: Point3, k: usize, best: &mut Vec<(f64, usize)>) {
        match &self.nodes[node] {
            KdNode::Leaf { start, len } => {
                for &i in &self.order[*start..*start + *len] {
                    let d2 = dist2(q, self.pts[i]);
                    Self::offer(best, k, (d2, i));
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, q, k, best);
                // Equal plane distance can still hide an equal-distance,
                // smaller-index point on the far side, so prune strictly.
                if best.len() < k || diff * diff <= Self::worst(best).0 {
                    self.search(far, q, k, best);
                }
            }
        }
    }

    fn worst(best: &[(f64, usize)]) -> (f64, usize) {
        let mut w = best[0];
        for &c in &best[1..] {
            if c > w {
                w = c;
            }
        }
        w
    }

    fn offer(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
        if best.len() < k {
            best.push(cand);
        } else {
            let mut wi = 0;
            for i in 1..best.len() {
                if best[i] > best[wi] {
                    wi = i;
                }
            }
            if cand < best[wi] {
                best[wi] = cand;
            }
        }
    }
}
