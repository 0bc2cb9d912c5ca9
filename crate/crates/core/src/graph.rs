//! Directed nearest-neighbour graphs over parcel gids and the merge
//! partitions extracted from them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Read-only view of a graph with outdegree at most one.
#[derive(Clone, Debug, Default)]
pub struct DirectedGraphView {
    out: BTreeMap<u64, u64>,
    incoming: BTreeMap<u64, Vec<u64>>,
    vertices: BTreeSet<u64>,
}

impl DirectedGraphView {
    pub fn from_edges(edges: impl IntoIterator<Item = (u64, u64)>) -> Result<Self> {
        let mut g = Self::default();
        for (s, t) in edges {
            if s == t {
                return Err(Error::InvalidInput(format!("self edge at {s}")));
            }
            if g.out.insert(s, t).is_some() {
                return Err(Error::InvalidInput(format!("vertex {s} has outdegree > 1")));
            }
            g.incoming.entry(t).or_default().push(s);
            g.vertices.insert(s);
            g.vertices.insert(t);
        }
        for v in g.incoming.values_mut() {
            v.sort_unstable();
        }
        Ok(g)
    }

    pub fn edges(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.out.iter().map(|(&s, &t)| (s, t))
    }

    pub fn n_edges(&self) -> usize {
        self.out.len()
    }

    pub fn target(&self, v: u64) -> Option<u64> {
        self.out.get(&v).copied()
    }

    pub fn in_neighbours(&self, v: u64) -> &[u64] {
        self.incoming.get(&v).map_or(&[], Vec::as_slice)
    }

    pub fn indegree(&self, v: u64) -> usize {
        self.in_neighbours(v).len()
    }

    pub fn is_leaf(&self, v: u64) -> bool {
        self.indegree(v) == 0
    }

    pub fn leaves(&self) -> BTreeSet<u64> {
        self.vertices
            .iter()
            .copied()
            .filter(|&v| self.is_leaf(v))
            .collect()
    }

    /// Leaves plus vertices whose in-neighbours are all leaves.
    pub fn available(&self) -> BTreeSet<u64> {
        self.vertices
            .iter()
            .copied()
            .filter(|&v| self.in_neighbours(v).iter().all(|&u| self.is_leaf(u)))
            .collect()
    }

    /// Mutual pairs `(u, v)` with `u < v`.
    pub fn dual_links(&self) -> Vec<(u64, u64)> {
        self.edges()
            .filter(|&(s, t)| s < t && self.target(t) == Some(s))
            .collect()
    }

    /// Length of the longest cycle, 0 when acyclic.
    pub fn longest_cycle(&self) -> usize {
        let mut state: BTreeMap<u64, usize> = BTreeMap::new();
        let mut longest = 0;
        for (walk, &start) in self.out.keys().enumerate() {
            let mut path = Vec::new();
            let mut v = start;
            loop {
                match state.get(&v) {
                    Some(&w) if w == walk + 1 => {
                        let pos = path.iter().position(|&p| p == v).unwrap();
                        longest = longest.max(path.len() - pos);
                        break;
                    }
                    Some(_) => break,
                    None => {}
                }
                state.insert(v, walk + 1);
                path.push(v);
                match self.target(v) {
                    Some(t) => v = t,
                    None => break,
                }
            }
        }
        longest
    }

    /// Edges on the longest directed simple path.
    pub fn longest_path(&self) -> usize {
        let mut best = 0;
        for &start in self.out.keys() {
            let mut seen = BTreeSet::from([start]);
            let mut v = start;
            while let Some(t) = self.target(v) {
                if !seen.insert(t) {
                    break;
                }
                v = t;
            }
            best = best.max(seen.len() - 1);
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MergeGroup {
    pub root: u64,
    /// Sorted, root included.
    pub members: Vec<u64>,
}

/// Disjoint merge groups ordered by root gid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<MergeGroup>,
}

impl Partition {
    pub fn new(groups: Vec<MergeGroup>) -> Self {
        let mut p = Self { groups };
        p.canonicalise();
        p
    }

    pub fn canonicalise(&mut self) {
        for g in &mut self.groups {
            g.members.sort_unstable();
            g.members.dedup();
        }
        self.groups.sort();
    }

    /// Groups of a resolved edge set. Every component must be a star whose
    /// leaves point at a single root.
    pub fn from_kept_edges(edges: impl IntoIterator<Item = (u64, u64)>) -> Result<Self> {
        let edges: Vec<(u64, u64)> = edges.into_iter().collect();
        let origins: BTreeMap<u64, u64> = edges.iter().copied().collect();
        if origins.len() != edges.len() {
            return Err(Error::Internal("vertex with two kept edges".into()));
        }
        let mut groups: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for &(s, t) in &edges {
            if let Some(&next) = origins.get(&t) {
                return Err(Error::Internal(format!(
                    "component deeper than one edge: {s} -> {t} -> {next}"
                )));
            }
            groups.entry(t).or_insert_with(|| vec![t]).push(s);
        }
        Ok(Self::new(
            groups
                .into_iter()
                .map(|(root, members)| MergeGroup { root, members })
                .collect(),
        ))
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Parcels removed by applying the partition.
    pub fn merges(&self) -> u64 {
        self.groups
            .iter()
            .map(|g| g.members.len() as u64 - 1)
            .sum()
    }

    /// Cluster count per size `n >= 2`.
    pub fn histogram(&self) -> BTreeMap<usize, u64> {
        let mut h = BTreeMap::new();
        for g in &self.groups {
            *h.entry(g.members.len()).or_insert(0) += 1;
        }
        h
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// A readable description of the first group that differs.
    pub fn first_difference(&self, other: &Partition) -> Option<String> {
        let n = self.groups.len().max(other.groups.len());
        (0..n).find_map(|i| match (self.groups.get(i), other.groups.get(i)) {
            (Some(a), Some(b)) if a == b => None,
            (a, b) => Some(format!("group {i}: {a:?} vs {b:?}")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // A..L as 0..11
    const A: u64 = 0;
    const B: u64 = 1;
    const C: u64 = 2;
    const D: u64 = 3;
    const E: u64 = 4;
    const F: u64 = 5;
    const G: u64 = 6;
    const H: u64 = 7;
    const I: u64 = 8;
    const J: u64 = 9;
    const K: u64 = 10;
    const L: u64 = 11;

    fn example() -> DirectedGraphView {
        DirectedGraphView::from_edges([
            (A, F),
            (B, F),
            (F, C),
            (C, D),
            (D, E),
            (E, H),
            (H, E),
            (G, I),
            (J, I),
            (K, I),
            (I, H),
            (L, H),
        ])
        .unwrap()
    }

    #[test]
    fn leaf_and_available_sets() {
        let g = example();
        assert_eq!(g.leaves(), BTreeSet::from([A, B, G, J, K, L]));
        assert_eq!(g.available(), BTreeSet::from([A, B, G, J, K, L, F, I]));
        assert_eq!(g.dual_links(), vec![(E, H)]);
        assert_eq!(g.longest_cycle(), 2);
        assert_eq!(g.indegree(H), 3);
        // A -> F -> C -> D -> E -> H
        assert_eq!(g.longest_path(), 5);
    }

    #[test]
    fn rejects_outdegree_two_and_self_edges() {
        assert!(DirectedGraphView::from_edges([(1, 2), (1, 3)]).is_err());
        assert!(DirectedGraphView::from_edges([(1, 1)]).is_err());
    }

    #[test]
    fn longer_cycles_detected() {
        let g = DirectedGraphView::from_edges([(1, 2), (2, 3), (3, 1), (4, 1)]).unwrap();
        assert_eq!(g.longest_cycle(), 3);
    }

    #[test]
    fn partition_from_stars() {
        let p = Partition::from_kept_edges([(A, F), (B, F), (C, D), (L, H), (E, H)]).unwrap();
        assert_eq!(
            p.groups,
            vec![
                MergeGroup {
                    root: D,
                    members: vec![C, D]
                },
                MergeGroup {
                    root: F,
                    members: vec![A, B, F]
                },
                MergeGroup {
                    root: H,
                    members: vec![E, H, L]
                },
            ]
        );
        assert_eq!(p.merges(), 5);
        assert_eq!(p.histogram(), BTreeMap::from([(2, 1), (3, 2)]));
        assert!(Partition::from_kept_edges([]).unwrap().is_empty());
    }

    #[test]
    fn partition_rejects_chains() {
        assert!(matches!(
            Partition::from_kept_edges([(1, 2), (2, 3)]),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn canonicalise_is_idempotent() {
        let mut p = Partition {
            groups: vec![
                MergeGroup {
                    root: 9,
                    members: vec![9, 3],
                },
                MergeGroup {
                    root: 1,
                    members: vec![4, 1, 2],
                },
            ],
        };
        p.canonicalise();
        let once = p.clone();
        p.canonicalise();
        assert_eq!(p, once);
        assert_eq!(once.groups[0].root, 1);
        assert_eq!(once.groups[0].members, vec![1, 2, 4]);
        let json = once.to_json().unwrap();
        assert_eq!(
            json,
            r#"{"groups":[{"root":1,"members":[1,2,4]},{"root":9,"members":[3,9]}]}"#
        );
    }
}
