//! Topological location graph.
//!
//! Holds the bidirectional neighbour links of every live location regardless
//! of its memory tier, so graph distances can be measured through locations
//! that currently sit in long-term memory.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::LocationId;

#[derive(Clone, Debug, Default)]
pub struct LocationGraph {
    adjacency: BTreeMap<LocationId, BTreeSet<LocationId>>,
}

impl LocationGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: LocationId) {
        self.adjacency.entry(id).or_default();
    }

    pub fn contains(&self, id: LocationId) -> bool {
        self.adjacency.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = LocationId> + '_ {
        self.adjacency.keys().copied()
    }

    /// Adds the undirected edge `a - b`. Self loops are ignored.
    pub fn link(&mut self, a: LocationId, b: LocationId) {
        if a == b {
            return;
        }
        self.adjacency.entry(a).or_default().insert(b);
        self.adjacency.entry(b).or_default().insert(a);
    }

    pub fn neighbors(&self, id: LocationId) -> impl Iterator<Item = LocationId> + '_ {
        self.adjacency.get(&id).into_iter().flatten().copied()
    }

    /// Removes a node and its edges, returning its former neighbours.
    pub fn remove_node(&mut self, id: LocationId) -> BTreeSet<LocationId> {
        let links = self.adjacency.remove(&id).unwrap_or_default();
        for n in &links {
            if let Some(set) = self.adjacency.get_mut(n) {
                set.remove(&id);
            }
        }
        links
    }

    /// Moves every edge of `from` onto `to` and removes `from`.
    pub fn absorb(&mut self, from: LocationId, to: LocationId) {
        for n in self.remove_node(from) {
            self.link(to, n);
        }
    }

    /// Adds to `to` an edge towards every neighbour of `from`.
    pub fn copy_links(&mut self, from: LocationId, to: LocationId) {
        let links: Vec<_> = self.neighbors(from).collect();
        for n in links {
            self.link(to, n);
        }
    }

    /// Breadth-first neighbourhood of `center` up to `radius` hops, including
    /// `center` itself at distance 0. Sorted by `(distance, id)`.
    pub fn within(&self, center: LocationId, radius: usize) -> Vec<(LocationId, usize)> {
        if !self.contains(center) {
            return Vec::new();
        }
        let mut seen = BTreeMap::from([(center, 0usize)]);
        let mut queue = VecDeque::from([center]);
        while let Some(node) = queue.pop_front() {
            let d = seen[&node];
            if d == radius {
                continue;
            }
            for n in self.neighbors(node) {
                if let std::collections::btree_map::Entry::Vacant(e) = seen.entry(n) {
                    e.insert(d + 1);
                    queue.push_back(n);
                }
            }
        }
        let mut out: Vec<_> = seen.into_iter().collect();
        out.sort_by_key(|&(id, d)| (d, id));
        out
    }

    /// Hop distance between `a` and `b` if it is at most `cap`.
    pub fn distance(&self, a: LocationId, b: LocationId, cap: usize) -> Option<usize> {
        self.within(a, cap)
            .into_iter()
            .find(|&(id, _)| id == b)
            .map(|(_, d)| d)
    }

    /// True when every edge is stored in both directions.
    pub fn is_symmetric(&self) -> bool {
        self.adjacency.iter().all(|(a, links)| {
            links
                .iter()
                .all(|b| self.adjacency.get(b).is_some_and(|s| s.contains(a)))
        })
    }
}

/// Index-based copy of a [`LocationGraph`] for running many bounded
/// breadth-first searches back to back.
#[derive(Clone, Debug)]
pub struct CompactGraph {
    ids: Vec<LocationId>,
    adjacency: Vec<Vec<u32>>,
    mark: Vec<u32>,
    epoch: u32,
}

impl CompactGraph {
    pub fn new(graph: &LocationGraph) -> Self {
        let ids: Vec<LocationId> = graph.nodes().collect();
        let index = |id: LocationId| ids.binary_search(&id).expect("linked node exists") as u32;
        let adjacency = ids
            .iter()
            .map(|&id| graph.neighbors(id).map(index).collect())
            .collect();
        Self { mark: vec![0; ids.len()], ids, adjacency, epoch: 0 }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Dense index of `id`, if present.
    pub fn index_of(&self, id: LocationId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn id_at(&self, index: usize) -> LocationId {
        self.ids[index]
    }

    /// Breadth-first neighbourhood as `(dense index, distance)` pairs in
    /// visiting order.
    pub fn within_indices(&mut self, center: LocationId, radius: usize) -> Vec<(u32, usize)> {
        let Some(start) = self.index_of(center) else {
            return Vec::new();
        };
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.mark.fill(0);
            self.epoch = 1;
        }
        self.mark[start] = self.epoch;
        let mut out = vec![(start as u32, 0usize)];
        let mut head = 0;
        while head < out.len() {
            let (node, d) = out[head];
            head += 1;
            if d == radius {
                continue;
            }
            for &n in &self.adjacency[node as usize] {
                if self.mark[n as usize] != self.epoch {
                    self.mark[n as usize] = self.epoch;
                    out.push((n, d + 1));
                }
            }
        }
        out
    }

    /// Same result as [`LocationGraph::within`].
    pub fn within(&mut self, center: LocationId, radius: usize) -> Vec<(LocationId, usize)> {
        let mut out: Vec<_> = self
            .within_indices(center, radius)
            .into_iter()
            .map(|(i, d)| (self.ids[i as usize], d))
            .collect();
        out.sort_by_key(|&(id, d)| (d, id));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: u64) -> LocationGraph {
        let mut g = LocationGraph::new();
        g.add_node(0);
        for i in 1..n {
            g.link(i - 1, i);
        }
        g
    }

    #[test]
    fn bfs_on_chain() {
        let g = chain(10);
        let near: Vec<_> = g.within(5, 2).into_iter().collect();
        assert_eq!(near, vec![(5, 0), (4, 1), (6, 1), (3, 2), (7, 2)]);
        assert_eq!(g.distance(0, 4, 4), Some(4));
        assert_eq!(g.distance(0, 5, 4), None);
        assert!(g.within(42, 3).is_empty());
    }

    #[test]
    fn absorb_repoints_links() {
        let mut g = chain(4);
        g.absorb(1, 3);
        assert!(!g.contains(1));
        assert_eq!(g.neighbors(3).collect::<Vec<_>>(), vec![0, 2]);
        assert!(g.is_symmetric());
    }

    #[test]
    fn copy_links_keeps_source() {
        let mut g = chain(3);
        g.add_node(9);
        g.copy_links(1, 9);
        assert_eq!(g.neighbors(9).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(g.neighbors(1).collect::<Vec<_>>(), vec![0, 2]);
        assert!(g.is_symmetric());
        g.link(4, 4);
        assert!(!g.contains(4));
    }

    proptest::proptest! {
        #[test]
        fn compact_bfs_matches(
            edges in proptest::collection::vec((0u64..40, 0u64..40), 0..120),
            center in 0u64..45,
            radius in 0usize..6,
        ) {
            let mut g = LocationGraph::new();
            for (a, b) in edges {
                g.add_node(a);
                g.link(a, b);
            }
            let mut compact = CompactGraph::new(&g);
            proptest::prop_assert_eq!(compact.within(center, radius), g.within(center, radius));
            proptest::prop_assert_eq!(compact.within(center, radius + 1), g.within(center, radius + 1));
        }
    }
}
