//! Exact k-nearest-neighbor search and per-point local neighborhoods.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::pointcloud::PointCloud;

const LEAF_SIZE: usize = 12;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a borrowed-then-copied point set.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Point indices, grouped so each leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Candidate ordered by (squared distance, index) so ties go to the lower index.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot build a kd-tree over zero points"));
        }
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        tree.build_node(0, points.len());
        Ok(tree)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] == 0.0 {
            // All points coincide.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Indices held by each leaf.
    pub fn leaves(&self) -> Vec<&[usize]> {
        self.nodes
            .iter()
            .filter_map(|n| match *n {
                Node::Leaf { start, end } => Some(&self.order[start..end]),
                Node::Split { .. } => None,
            })
            .collect()
    }

    /// Check the split invariant: left subtree coordinates ≤ split value ≤
    /// right subtree coordinates along the split axis.
    pub fn check_invariants(&self) -> bool {
        fn collect(tree: &KdTree, node: usize, out: &mut Vec<usize>) {
            match tree.nodes[node] {
                Node::Leaf { start, end } => out.extend_from_slice(&tree.order[start..end]),
                Node::Split { left, right, .. } => {
                    collect(tree, left, out);
                    collect(tree, right, out);
                }
            }
        }
        self.nodes.iter().all(|n| match *n {
            Node::Leaf { .. } => true,
            Node::Split { axis, value, left, right } => {
                let (mut l, mut r) = (Vec::new(), Vec::new());
                collect(self, left, &mut l);
                collect(self, right, &mut r);
                l.iter().all(|&i| self.points[i][axis] <= value)
                    && r.iter().all(|&i| self.points[i][axis] >= value)
            }
        })
    }

    /// The `k` nearest points to `query` in ascending distance, ties to the
    /// lower index. `exclude` removes one index from consideration.
    pub fn knn(&self, query: Vec3, k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k > available {
            return Err(Error::invalid(format!("k = {k} exceeds the {available} available points")));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        Ok(heap.into_sorted_vec().into_iter().map(|c| c.index).collect())
    }

    fn search(
        &self,
        node: usize,
        query: Vec3,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    if Some(index) == exclude {
                        continue;
                    }
                    let c = Candidate { d2: geom::dist2(query, self.points[index]), index };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = query[axis] - value;
                let (near, far) = if delta <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, heap);
                let worst = heap.peek().map_or(f64::INFINITY, |c| c.d2);
                if heap.len() < k || delta * delta <= worst {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }
}

/// Exhaustive kNN with the same ordering and exclusion contract as [`KdTree::knn`].
pub fn brute_force_knn(points: &[Vec3], query: Vec3, k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(index, &p)| Candidate { d2: geom::dist2(query, p), index })
        .collect();
    if k > all.len() {
        return Err(Error::invalid(format!("k = {k} exceeds the {} available points", all.len())));
    }
    all.sort();
    Ok(all.into_iter().take(k).map(|c| c.index).collect())
}

/// Per-point neighbor lists with offsets relative to the center point. Each
/// point is its own first neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodIndex {
    n: usize,
    k: usize,
    indices: Vec<usize>,
    offsets: Vec<Vec3>,
}

impl NeighborhoodIndex {
    /// Assemble from flat row-major `n × k` index lists; offsets are computed
    /// from `points`.
    pub fn from_indices(points: &[Vec3], k: usize, indices: Vec<usize>) -> Result<Self> {
        let n = points.len();
        if k == 0 || indices.len() != n * k {
            return Err(Error::invalid(format!(
                "{} neighbor indices do not form {n} rows of k = {k}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::Index { op: "neighborhood", index: bad, len: n });
        }
        let offsets = indices
            .iter()
            .enumerate()
            .map(|(flat, &j)| geom::sub(points[j], points[flat / k]))
            .collect();
        Ok(NeighborhoodIndex { n, k, indices, offsets })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    pub fn offset(&self, i: usize, j: usize) -> Vec3 {
        self.offsets[i * self.k + j]
    }
}

/// Neighborhoods of size `k` for every point: the point itself followed by
/// its `k − 1` nearest other points.
pub fn build_neighborhoods(cloud: &PointCloud, k: usize) -> Result<NeighborhoodIndex> {
    build_neighborhoods_for(cloud.points(), k)
}

pub fn build_neighborhoods_for(points: &[Vec3], k: usize) -> Result<NeighborhoodIndex> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={n}")));
    }
    let tree = KdTree::build(points)?;
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(k);
            row.push(i);
            row.extend(tree.knn(points[i], k - 1, Some(i))?);
            Ok(row)
        })
        .collect::<Result<_>>()?;
    NeighborhoodIndex::from_indices(points, k, rows.concat())
}

/// Reference (density, k) pairs.
pub const DENSITY_K_TABLE: [(usize, usize); 4] = [(1024, 32), (2048, 64), (4096, 96), (8096, 128)];

/// Neighborhood size for a cloud of `n_points`: exact at the reference
/// densities, linear in between (and through the origin below the first),
/// clamped to [8, 128] and rounded to the nearest integer.
pub fn k_for_density(n_points: usize) -> usize {
    let n = n_points as f64;
    let (d0, k0) = DENSITY_K_TABLE[0];
    let raw = if n_points <= d0 {
        k0 as f64 * n / d0 as f64
    } else {
        DENSITY_K_TABLE
            .windows(2)
            .find(|w| n_points <= w[1].0)
            .map(|w| {
                let ((da, ka), (db, kb)) = (w[0], w[1]);
                ka as f64 + (kb as f64 - ka as f64) * (n - da as f64) / (db as f64 - da as f64)
            })
            .unwrap_or(DENSITY_K_TABLE[3].1 as f64)
    };
    (raw.round() as usize).clamp(8, 128)
}
