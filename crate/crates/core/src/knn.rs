//! Exact k-nearest-neighbor queries over a static cloud using a kd-tree.
//!
//! Results are ordered by ascending squared Euclidean distance with ties broken
//! by smaller index, so they agree exactly with a brute-force sort.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud::PointCloud;
use crate::geom::{self, Point};

pub const DEFAULT_LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Point>,
    /// Point indices, permuted so every leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl NeighborIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        Self::with_leaf_size(cloud.points(), DEFAULT_LEAF_SIZE)
    }

    pub fn from_points(points: &[Point]) -> Self {
        Self::with_leaf_size(points, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: &[Point], leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let mut index = NeighborIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            leaf_size,
        };
        if !points.is_empty() {
            index.split(0, points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    fn split(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = &self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            // all points coincide; no split can separate them
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.split(start, mid);
        let right = self.split(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `min(k, n-1)` nearest neighbors of point `i`, excluding `i` itself.
    pub fn query(&self, i: usize, k: usize) -> Vec<usize> {
        let k = k.min(self.len().saturating_sub(1));
        self.search(&self.points[i], k, Some(i))
            .into_iter()
            .map(|c| c.1)
            .collect()
    }

    /// Like [`query`](Self::query) but also returns the Euclidean distances.
    pub fn query_with_distances(&self, i: usize, k: usize) -> Vec<(f64, usize)> {
        let k = k.min(self.len().saturating_sub(1));
        self.search(&self.points[i], k, Some(i))
            .into_iter()
            .map(|(d2, j)| (d2.sqrt(), j))
            .collect()
    }

    /// The `min(k, n)` nearest indexed points to an arbitrary location.
    pub fn query_point(&self, p: &Point, k: usize) -> Vec<usize> {
        let k = k.min(self.len());
        self.search(p, k, None).into_iter().map(|c| c.1).collect()
    }

    /// Nearest indexed point and its Euclidean distance.
    pub fn nearest(&self, p: &Point) -> Option<(usize, f64)> {
        self.search(p, 1, None)
            .first()
            .map(|&(d2, j)| (j, d2.sqrt()))
    }

    fn search(&self, q: &Point, k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.visit(0, q, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.d2, c.idx)).collect()
    }

    fn visit(
        &self,
        node: usize,
        q: &Point,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &j in &self.order[start..end] {
                    if Some(j) == exclude {
                        continue;
                    }
                    let cand = Candidate {
                        d2: geom::dist2(q, &self.points[j]),
                        idx: j,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("nonempty") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, q, k, exclude, heap);
                // Points equal to the split value may sit on either side, so the
                // far side is pruned only when strictly out of reach.
                let bound = diff * diff;
                if heap.len() < k || bound <= heap.peek().expect("nonempty").d2 {
                    self.visit(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// Brute-force kNN of point `i` with the same ordering rules as the index.
pub fn brute_force_knn(points: &[Point], i: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, p)| (geom::dist2(&points[i], p), j))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(_, j)| j).collect()
}
