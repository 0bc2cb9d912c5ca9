//! Single-process reference for the whole clustering step.
//!
//! Shares only geometry with the distributed path: the graph is built by
//! scanning a global cell index, and resolution works directly on the
//! definitional leaf and available sets of the remaining edges.

use std::collections::BTreeMap;

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::graph::{MergeGroup, Partition};
use crate::parcels::Parcel;

/// Directed nearest-neighbour edges `(origin gid, target gid)` and the
/// number of distance evaluations spent.
pub fn oracle_edges(parcels: &[Parcel], domain: &Domain) -> Result<(BTreeMap<u64, u64>, u64)> {
    let mut by_cell: Vec<Vec<usize>> = vec![Vec::new(); domain.n_cells()];
    for (i, p) in parcels.iter().enumerate() {
        let q = domain.normalise(p.position)?;
        by_cell[domain.linear_cell(domain.cell_of(q))].push(i);
    }
    let v_min = domain.min_volume();
    let mut edges = BTreeMap::new();
    let mut evaluations = 0u64;
    for (i, p) in parcels.iter().enumerate() {
        if p.volume >= v_min {
            continue;
        }
        let mut best: Option<(f64, u64)> = None;
        for &c in domain.stencil_of(p.position)?.as_slice() {
            for &j in &by_cell[domain.linear_cell(c)] {
                if j == i {
                    continue;
                }
                evaluations += 1;
                let d = domain.distance_sq(p.position, parcels[j].position);
                let cand = (d, parcels[j].gid);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
        if let Some((_, gid)) = best {
            if edges.insert(p.gid, gid).is_some() {
                return Err(Error::InvalidInput(format!("duplicate gid {}", p.gid)));
            }
        }
    }
    Ok((edges, evaluations))
}

/// Resolves a gid graph with outdegree at most one into kept edges.
///
/// Isolated dual pairs lose the edge of the endpoint with the smaller gid.
pub fn oracle_resolve(edges: &BTreeMap<u64, u64>) -> (Vec<(u64, u64)>, u64) {
    let mut active = edges.clone();
    let mut finalized: Vec<(u64, u64)> = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let indeg = indegrees(&active);
        let is_leaf = |v: u64| !indeg.contains_key(&v);
        // available: every in-neighbour is a leaf
        let mut blocked = std::collections::BTreeSet::new();
        for (&s, &t) in &active {
            if !is_leaf(s) {
                blocked.insert(t);
            }
        }
        let is_available = |v: u64| !blocked.contains(&v);
        let mut finalize = Vec::new();
        let mut remove = Vec::new();
        for (&s, &t) in &active {
            let dual = active.get(&t) == Some(&s);
            if is_leaf(s) && is_available(t) {
                finalize.push(s);
            } else if !is_leaf(s) && is_available(s) && !dual {
                remove.push(s);
            }
        }
        if finalize.is_empty() && remove.is_empty() {
            break;
        }
        for s in finalize {
            finalized.push((s, active.remove(&s).expect("active origin")));
        }
        for s in remove {
            active.remove(&s);
        }
    }

    let indeg = indegrees(&active);
    let mut drop = Vec::new();
    for (&u, &v) in &active {
        if active.get(&v) != Some(&u) {
            // a non-leaf outside a dual link sits on a longer cycle
            if indeg.contains_key(&u) {
                drop.push(u);
            }
            continue;
        }
        let (du, dv) = (indeg[&u], indeg[&v]);
        if du > 1 || (du == 1 && dv == 1 && u < v) {
            drop.push(u);
        }
    }
    for u in drop {
        active.remove(&u);
    }
    finalized.extend(active);
    finalized.sort_unstable();
    (finalized, iterations)
}

fn indegrees(edges: &BTreeMap<u64, u64>) -> BTreeMap<u64, usize> {
    let mut d = BTreeMap::new();
    for &t in edges.values() {
        *d.entry(t).or_insert(0) += 1;
    }
    d
}

/// Groups kept edges by weakly connected component.
fn components(kept: &[(u64, u64)]) -> Result<Partition> {
    let mut ids: BTreeMap<u64, usize> = BTreeMap::new();
    for &(s, t) in kept {
        let n = ids.len();
        ids.entry(s).or_insert(n);
        let n = ids.len();
        ids.entry(t).or_insert(n);
    }
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(s, t) in kept {
        let (a, b) = (find(&mut parent, ids[&s]), find(&mut parent, ids[&t]));
        parent[a.max(b)] = a.min(b);
    }
    let origins: BTreeMap<u64, u64> = kept.iter().copied().collect();
    let mut comps: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (&v, &id) in &ids {
        let r = find(&mut parent, id);
        comps.entry(r).or_default().push(v);
    }
    let mut groups = Vec::new();
    for members in comps.into_values() {
        let roots: Vec<u64> = members
            .iter()
            .copied()
            .filter(|v| !origins.contains_key(v))
            .collect();
        let [root] = roots[..] else {
            return Err(Error::Internal(format!(
                "component {members:?} has roots {roots:?}"
            )));
        };
        if members.iter().any(|v| v != &root && origins[v] != root) {
            return Err(Error::Internal(format!("component {members:?} is not a star")));
        }
        groups.push(MergeGroup { root, members });
    }
    Ok(Partition::new(groups))
}

/// The merge partition the distributed algorithm must reproduce.
pub fn oracle_cluster(parcels: &[Parcel], domain: &Domain) -> Result<Partition> {
    let (edges, _) = oracle_edges(parcels, domain)?;
    let (kept, _) = oracle_resolve(&edges);
    components(&kept)
}
