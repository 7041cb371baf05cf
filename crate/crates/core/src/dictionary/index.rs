//! Nearest-neighbour search over word descriptors.
//!
//! [`KdForest`] is a forest of randomized kd-trees searched best-bin-first
//! across all trees at once, in the style of FLANN. Split dimensions are drawn
//! at random among the highest-variance ones so the trees partition the space
//! differently. [`linear_nearest2`] is the exact scan used for small
//! dictionaries and for words added since the last rebuild.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::squared_distance;
use crate::WordId;

const VARIANCE_SAMPLE: usize = 128;
const TOP_DIMS: usize = 5;

/// Best and second-best candidates, by squared distance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Nearest2 {
    pub first: Option<(WordId, f32)>,
    pub second: Option<(WordId, f32)>,
}

impl Nearest2 {
    pub fn offer(&mut self, id: WordId, dist_sq: f32) {
        let better = |cur: Option<(WordId, f32)>| match cur {
            None => true,
            Some((cid, cd)) => dist_sq < cd || (dist_sq == cd && id < cid),
        };
        if better(self.first) {
            self.second = self.first;
            self.first = Some((id, dist_sq));
        } else if better(self.second) {
            self.second = Some((id, dist_sq));
        }
    }

    pub fn merge(&mut self, other: Nearest2) {
        for (id, d) in [other.first, other.second].into_iter().flatten() {
            self.offer(id, d);
        }
    }

    fn worst(&self) -> f32 {
        self.second.map_or(f32::INFINITY, |(_, d)| d)
    }
}

/// Exact two-nearest scan.
pub fn linear_nearest2<'a>(
    query: &[f32],
    candidates: impl IntoIterator<Item = (WordId, &'a [f32])>,
) -> Nearest2 {
    let mut best = Nearest2::default();
    for (id, v) in candidates {
        best.offer(id, squared_distance(query, v));
    }
    best
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f32, left: usize, right: usize },
}

#[derive(Clone, Debug)]
struct Tree {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForestParams {
    pub trees: usize,
    pub checks: usize,
    pub leaf_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct KdForest {
    dim: usize,
    ids: Vec<WordId>,
    data: Vec<f32>,
    alive: Vec<bool>,
    trees: Vec<Tree>,
    checks: usize,
}

#[derive(PartialEq)]
struct Branch {
    bound: f32,
    tree: usize,
    node: usize,
}

impl Eq for Branch {}

impl Ord for Branch {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Branch {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdForest {
    /// Builds the forest. Points must come in strictly increasing id order.
    pub fn build<'a>(
        dim: usize,
        points: impl IntoIterator<Item = (WordId, &'a [f32])>,
        params: &ForestParams,
    ) -> Self {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, v) in points {
            debug_assert_eq!(v.len(), dim);
            ids.push(id);
            data.extend_from_slice(v);
        }
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]), "ids must be strictly increasing");
        let n = ids.len();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let leaf_size = params.leaf_size.max(1);
        let trees = (0..params.trees.max(1))
            .map(|_| {
                let mut tree = Tree {
                    nodes: Vec::new(),
                    order: (0..n).collect(),
                };
                if n > 0 {
                    build_node(&mut tree, &data, dim, 0, n, leaf_size, &mut rng);
                }
                tree
            })
            .collect();
        Self {
            dim,
            ids,
            alive: vec![true; n],
            data,
            trees,
            checks: params.checks.max(1),
        }
    }

    fn point(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Marks a point as deleted; searches skip it.
    pub fn remove(&mut self, id: WordId) -> bool {
        match self.ids.binary_search(&id) {
            Ok(i) if self.alive[i] => {
                self.alive[i] = false;
                true
            }
            _ => false,
        }
    }

    /// Live ids held by the forest.
    pub fn live_ids(&self) -> impl Iterator<Item = WordId> + '_ {
        self.ids
            .iter()
            .zip(&self.alive)
            .filter(|(_, &a)| a)
            .map(|(&id, _)| id)
    }

    /// Approximate two nearest live points.
    pub fn nearest2(&self, query: &[f32]) -> Nearest2 {
        let mut best = Nearest2::default();
        if self.ids.is_empty() {
            return best;
        }
        let mut visited = vec![false; self.ids.len()];
        let mut heap = BinaryHeap::new();
        for tree in 0..self.trees.len() {
            heap.push(Branch {
                bound: 0.0,
                tree,
                node: 0,
            });
        }
        let mut checked = 0usize;
        while let Some(Branch { bound, tree, node }) = heap.pop() {
            if bound >= best.worst() || (checked >= self.checks && best.second.is_some()) {
                break;
            }
            let t = &self.trees[tree];
            let mut current = node;
            loop {
                match t.nodes[current] {
                    Node::Leaf { start, end } => {
                        for &i in &t.order[start..end] {
                            if visited[i] {
                                continue;
                            }
                            visited[i] = true;
                            if !self.alive[i] {
                                continue;
                            }
                            checked += 1;
                            best.offer(self.ids[i], squared_distance(query, self.point(i)));
                        }
                        break;
                    }
                    Node::Split {
                        dim,
                        value,
                        left,
                        right,
                    } => {
                        let diff = query[dim] - value;
                        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                        let far_bound = bound.max(diff * diff);
                        if far_bound < best.worst() {
                            heap.push(Branch {
                                bound: far_bound,
                                tree,
                                node: far,
                            });
                        }
                        current = near;
                    }
                }
            }
        }
        best
    }
}

fn build_node(
    tree: &mut Tree,
    data: &[f32],
    dim: usize,
    start: usize,
    end: usize,
    leaf_size: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let slot = tree.nodes.len();
    tree.nodes.push(Node::Leaf { start, end });
    if end - start <= leaf_size {
        return slot;
    }
    let coord = |i: usize, d: usize| data[i * dim + d];
    let members = &tree.order[start..end];
    let sample: Vec<usize> = if members.len() > VARIANCE_SAMPLE {
        (0..VARIANCE_SAMPLE)
            .map(|_| members[rng.random_range(0..members.len())])
            .collect()
    } else {
        members.to_vec()
    };
    let mut stats: Vec<(f32, usize, f32)> = (0..dim)
        .map(|d| {
            let n = sample.len() as f32;
            let mean = sample.iter().map(|&i| coord(i, d)).sum::<f32>() / n;
            let var = sample
                .iter()
                .map(|&i| (coord(i, d) - mean).powi(2))
                .sum::<f32>()
                / n;
            (var, d, mean)
        })
        .collect();
    stats.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let spread = stats.iter().take(TOP_DIMS).take_while(|s| s.0 > 0.0).count();
    if spread == 0 {
        return slot;
    }
    let &(_, split_dim, mut value) = stats[..spread].choose(rng).expect("spread >= 1");

    let order = &mut tree.order[start..end];
    let mut mid = partition(order, |i| coord(i, split_dim) < value);
    if mid == 0 || mid == order.len() {
        let half = order.len() / 2;
        order.select_nth_unstable_by(half, |&a, &b| {
            coord(a, split_dim).total_cmp(&coord(b, split_dim))
        });
        value = coord(order[half], split_dim);
        mid = partition(order, |i| coord(i, split_dim) < value);
        if mid == 0 {
            // many equal values: put the ties on the left
            mid = partition(order, |i| coord(i, split_dim) <= value);
            if mid == order.len() {
                return slot;
            }
            value = next_up(value);
        }
    }
    let left = build_node(tree, data, dim, start, start + mid, leaf_size, rng);
    let right = build_node(tree, data, dim, start + mid, end, leaf_size, rng);
    tree.nodes[slot] = Node::Split {
        dim: split_dim,
        value,
        left,
        right,
    };
    slot
}

fn next_up(v: f32) -> f32 {
    if v.is_nan() || v == f32::INFINITY {
        return v;
    }
    if v == 0.0 {
        return f32::from_bits(1);
    }
    let bits = v.to_bits();
    f32::from_bits(if v > 0.0 { bits + 1 } else { bits - 1 })
}

fn partition(items: &mut [usize], mut pred: impl FnMut(usize) -> bool) -> usize {
    let mut mid = 0;
    for j in 0..items.len() {
        if pred(items[j]) {
            items.swap(mid, j);
            mid += 1;
        }
    }
    mid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random::<f32>()).collect())
            .collect()
    }

    fn params(checks: usize) -> ForestParams {
        ForestParams {
            trees: 4,
            checks,
            leaf_size: 8,
            seed: 1,
        }
    }

    #[test]
    fn nearest2_ordering_and_ties() {
        let mut n = Nearest2::default();
        n.offer(5, 2.0);
        n.offer(3, 1.0);
        n.offer(9, 1.0);
        n.offer(1, 3.0);
        assert_eq!(n.first, Some((3, 1.0)));
        assert_eq!(n.second, Some((9, 1.0)));
    }

    #[test]
    fn empty_forest_finds_nothing() {
        let f = KdForest::build(4, std::iter::empty(), &params(8));
        assert_eq!(f.nearest2(&[0.0; 4]), Nearest2::default());
    }

    #[test]
    fn exact_when_checks_cover_everything() {
        let pts = random_points(500, 8, 3);
        let f = KdForest::build(8, pts.iter().enumerate().map(|(i, p)| (i as WordId, p.as_slice())), &params(10_000));
        for q in random_points(50, 8, 4) {
            let exact = linear_nearest2(&q, pts.iter().enumerate().map(|(i, p)| (i as WordId, p.as_slice())));
            assert_eq!(f.nearest2(&q), exact);
        }
    }

    #[test]
    fn removed_points_are_skipped() {
        let pts = random_points(100, 4, 5);
        let mut f = KdForest::build(4, pts.iter().enumerate().map(|(i, p)| (i as WordId, p.as_slice())), &params(1000));
        assert!(f.remove(7));
        assert!(!f.remove(7));
        let hit = f.nearest2(&pts[7]);
        assert_ne!(hit.first.unwrap().0, 7);
        assert_eq!(f.live_ids().count(), 99);
    }

    #[test]
    fn duplicate_points_build() {
        let p = vec![0.5f32; 4];
        let pts: Vec<(WordId, &[f32])> = (0..50).map(|i| (i, p.as_slice())).collect();
        let f = KdForest::build(4, pts, &params(16));
        let hit = f.nearest2(&p);
        assert_eq!(hit.first.unwrap().1, 0.0);
        assert_eq!(hit.second.unwrap().1, 0.0);
    }
}
