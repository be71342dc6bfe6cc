//! Static k-d tree for k-nearest-neighbour distance queries on small,
//! low-dimensional point clouds.

/// Points are stored flat, `dim` coordinates per point.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    /// Permutation of point indices; subtrees are contiguous ranges of it.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
struct Node {
    /// Range into `order`.
    start: usize,
    end: usize,
    split_dim: usize,
    split: f64,
    left: Option<usize>,
    right: Option<usize>,
}

const LEAF_SIZE: usize = 12;

impl KdTree {
    pub fn new(points: &[f64], dim: usize) -> Self {
        assert!(
            dim > 0 && points.len().is_multiple_of(dim),
            "flat point buffer must hold whole points"
        );
        let n = points.len() / dim;
        let mut tree = Self {
            dim,
            points: points.to_vec(),
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn coord(&self, i: usize, d: usize) -> f64 {
        self.points[i * self.dim + d]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            start,
            end,
            split_dim: 0,
            split: 0.0,
            left: None,
            right: None,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        // Split on the widest dimension at the median.
        let mut best = (0, -1.0);
        for d in 0..self.dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.coord(i, d);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let d = best.0;
        if best.1 <= 0.0 {
            return id;
        }
        let mid = start + (end - start) / 2;
        let (dim, pts) = (self.dim, &self.points);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a * dim + d].total_cmp(&pts[b * dim + d])
        });
        let split = self.coord(self.order[mid], d);
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        let node = &mut self.nodes[id];
        node.split_dim = d;
        node.split = split;
        node.left = Some(left);
        node.right = Some(right);
        id
    }

    /// Distance to the `k`-th nearest stored point at a nonzero distance from
    /// `query` (coincident points, including the query itself, are skipped).
    /// Returns `None` when fewer than `k` such points exist.
    pub fn kth_distance(&self, query: &[f64], k: usize) -> Option<f64> {
        assert_eq!(query.len(), self.dim);
        if k == 0 || self.is_empty() {
            return None;
        }
        // Squared distances of the best candidates, ascending.
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        self.search(0, query, k, &mut best);
        if best.len() == k {
            Some(best[k - 1].sqrt())
        } else {
            None
        }
    }

    fn search(&self, node: usize, q: &[f64], k: usize, best: &mut Vec<f64>) {
        let n = &self.nodes[node];
        match (n.left, n.right) {
            (Some(l), Some(r)) => {
                let diff = q[n.split_dim] - n.split;
                let (near, far) = if diff < 0.0 { (l, r) } else { (r, l) };
                self.search(near, q, k, best);
                if best.len() < k || diff * diff <= best[best.len() - 1] {
                    self.search(far, q, k, best);
                }
            }
            _ => {
                for &i in &self.order[n.start..n.end] {
                    let mut d2 = 0.0;
                    for (d, qd) in q.iter().enumerate() {
                        let t = self.coord(i, d) - qd;
                        d2 += t * t;
                    }
                    if d2 == 0.0 {
                        continue;
                    }
                    if best.len() < k || d2 < best[best.len() - 1] {
                        let pos = best.partition_point(|&b| b <= d2);
                        best.insert(pos, d2);
                        best.truncate(k);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[f64], dim: usize, q: &[f64], k: usize) -> Option<f64> {
        let mut d: Vec<f64> = points
            .chunks(dim)
            .map(|p| p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .filter(|&d2| d2 > 0.0)
            .collect();
        d.sort_by(f64::total_cmp);
        d.get(k - 1).map(|v| v.sqrt())
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for dim in [1, 2, 3] {
            let pts: Vec<f64> = (0..600 * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let tree = KdTree::new(&pts, dim);
            for trial in 0..100 {
                // Half the queries hit stored points, which must be skipped.
                let q: Vec<f64> = if trial % 2 == 0 {
                    pts[trial * dim..(trial + 1) * dim].to_vec()
                } else {
                    (0..dim).map(|_| rng.random_range(-1.2..1.2)).collect()
                };
                for k in [1, 3] {
                    assert_eq!(tree.kth_distance(&q, k), brute(&pts, dim, &q, k));
                }
            }
        }
    }

    #[test]
    fn duplicates_and_small_sets() {
        let pts = [0.0, 0.0, 0.0, 1.0, 3.0];
        let tree = KdTree::new(&pts, 1);
        assert_eq!(tree.kth_distance(&[0.0], 1), Some(1.0));
        assert_eq!(tree.kth_distance(&[0.0], 2), Some(3.0));
        assert_eq!(tree.kth_distance(&[0.0], 3), None);
        let same = KdTree::new(&[2.0; 40], 1);
        assert_eq!(same.kth_distance(&[2.0], 1), None);
        assert!(KdTree::new(&[], 2).kth_distance(&[0.0, 0.0], 1).is_none());
    }
}
