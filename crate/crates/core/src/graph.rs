//! Undirected graphs on p nodes and the enumeration of edge slots.

use serde::{Deserialize, Serialize};

/// Simple undirected graph stored as a symmetric adjacency matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Graph {
    p: usize,
    adj: Vec<bool>,
}

impl Graph {
    pub fn empty(p: usize) -> Self {
        Graph { p, adj: vec![false; p * p] }
    }

    pub fn complete(p: usize) -> Self {
        let mut g = Graph::empty(p);
        for (i, j) in edge_slots(p) {
            g.set(i, j, true);
        }
        g
    }

    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = Graph::empty(p);
        for &(i, j) in edges {
            g.set(i, j, true);
        }
        g
    }

    /// Builds a graph from one indicator per edge slot, in slot order.
    pub fn from_slots(p: usize, present: &[bool]) -> Self {
        let mut g = Graph::empty(p);
        for ((i, j), &on) in edge_slots(p).zip(present) {
            g.set(i, j, on);
        }
        g
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.p + j]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        assert!(i != j, "self-loop ({i}, {i})");
        self.adj[i * self.p + j] = on;
        self.adj[j * self.p + i] = on;
    }

    pub fn toggle(&mut self, i: usize, j: usize) {
        let on = self.has_edge(i, j);
        self.set(i, j, !on);
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.p).filter(|&j| self.has_edge(i, j)).collect()
    }

    pub fn n_edges(&self) -> usize {
        edge_slots(self.p).filter(|&(i, j)| self.has_edge(i, j)).count()
    }

    /// Number of nodes adjacent to both `i` and `j`.
    pub fn common_neighbors(&self, i: usize, j: usize) -> usize {
        (0..self.p)
            .filter(|&l| l != i && l != j && self.has_edge(i, l) && self.has_edge(j, l))
            .count()
    }

    /// Edge indicators in slot order.
    pub fn slots(&self) -> Vec<bool> {
        edge_slots(self.p).map(|(i, j)| self.has_edge(i, j)).collect()
    }

    /// Bitmask over slots (slot s ↦ bit s); only meaningful for small p.
    pub fn slot_mask(&self) -> usize {
        self.slots()
            .iter()
            .enumerate()
            .fold(0, |acc, (s, &on)| if on { acc | (1 << s) } else { acc })
    }
}

pub fn n_slots(p: usize) -> usize {
    p * p.saturating_sub(1) / 2
}

/// Edge slots `(j1, j2)` with `j1 < j2` in lexicographic order.
pub fn edge_slots(p: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..p).flat_map(move |i| (i + 1..p).map(move |j| (i, j)))
}

pub fn slot_index(p: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    i * (2 * p - i - 1) / 2 + (j - i - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn slot_order_is_lexicographic() {
        let slots: Vec<_> = edge_slots(4).collect();
        assert_eq!(slots, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        for (s, (i, j)) in slots.iter().enumerate() {
            assert_eq!(slot_index(4, *i, *j), s);
            assert_eq!(slot_index(4, *j, *i), s);
        }
        assert_eq!(n_slots(10), 45);
    }

    #[test]
    fn graph_basics() {
        let mut g = Graph::from_edges(4, &[(0, 1), (1, 2), (0, 2), (2, 3)]);
        assert!(g.has_edge(1, 0));
        assert_eq!(g.common_neighbors(0, 1), 1);
        assert_eq!(g.n_edges(), 4);
        g.toggle(2, 3);
        assert!(!g.has_edge(3, 2));
        assert_eq!(Graph::from_slots(4, &g.slots()), g);
    }

    proptest! {
        #[test]
        fn slots_round_trip(p in 2usize..9, bits in any::<u64>()) {
            let on: Vec<bool> = (0..n_slots(p)).map(|s| bits >> (s % 64) & 1 == 1).collect();
            let g = Graph::from_slots(p, &on);
            prop_assert_eq!(g.slots(), on.clone());
            prop_assert_eq!(g.n_edges(), on.iter().filter(|&&b| b).count());
            for (s, (i, j)) in edge_slots(p).enumerate() {
                prop_assert_eq!(slot_index(p, j, i), s);
                prop_assert_eq!(g.has_edge(i, j), g.has_edge(j, i));
            }
        }
    }
}
