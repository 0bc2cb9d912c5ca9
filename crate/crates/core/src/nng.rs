//! Construction of the directed nearest-neighbour graph across workers.
//!
//! Each small parcel links to the closest other parcel found in the cells
//! around its nearest grid node. Small parcels whose search cells belong to
//! other workers are copied there, searched against the receiver's own
//! parcels, and the best remote answer is sent back to the owner, which keeps
//! the global minimum.

use std::io::Write;

use crate::domain::{Cell, Decomposition, Domain};
use crate::error::{Error, Result};
use crate::message::Msg;
use crate::parcels::{ParcelStore, Provenance};
use crate::runtime::{WorkerCtx, WorkerProgram, Yield};

/// `iclo` of an entry without a candidate.
pub const NO_CANDIDATE: usize = usize::MAX;

/// One outgoing edge per small parcel, as parallel arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateArrays {
    /// Small parcel index on this worker.
    pub isma: Vec<usize>,
    /// Closest parcel, as an index on worker `rclo`.
    pub iclo: Vec<usize>,
    pub rclo: Vec<usize>,
    /// Squared minimum-image distance to the closest parcel.
    pub dclo: Vec<f64>,
    /// gid of the closest parcel.
    pub gclo: Vec<u64>,
    /// Set when the closest parcel links back.
    pub dual: Vec<bool>,
}

impl CandidateArrays {
    pub fn len(&self) -> usize {
        self.isma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.isma.is_empty()
    }

    pub fn push(&mut self, isma: usize, iclo: usize, rclo: usize, dclo: f64, gclo: u64) {
        self.isma.push(isma);
        self.iclo.push(iclo);
        self.rclo.push(rclo);
        self.dclo.push(dclo);
        self.gclo.push(gclo);
        self.dual.push(false);
    }

    /// Stable filter keeping entries where `keep[m]`.
    pub fn compact(&self, keep: &[bool]) -> CandidateArrays {
        assert_eq!(keep.len(), self.len());
        let pick = |m: &usize| keep[*m];
        let ms: Vec<usize> = (0..self.len()).filter(pick).collect();
        CandidateArrays {
            isma: ms.iter().map(|&m| self.isma[m]).collect(),
            iclo: ms.iter().map(|&m| self.iclo[m]).collect(),
            rclo: ms.iter().map(|&m| self.rclo[m]).collect(),
            dclo: ms.iter().map(|&m| self.dclo[m]).collect(),
            gclo: ms.iter().map(|&m| self.gclo[m]).collect(),
            dual: ms.iter().map(|&m| self.dual[m]).collect(),
        }
    }

    /// Dumps `isma,iclo,rclo,dclo` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["isma", "iclo", "rclo", "dclo"])?;
        for m in 0..self.len() {
            out.write_record([
                self.isma[m].to_string(),
                self.iclo[m].to_string(),
                self.rclo[m].to_string(),
                self.dclo[m].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Strict "closer than" on `(squared distance, gid)`.
#[inline]
pub fn closer(d: f64, gid: u64, best_d: f64, best_gid: u64) -> bool {
    d < best_d || (d == best_d && gid < best_gid)
}

/// Ascending local indices of owned small parcels.
pub fn collect_small(store: &ParcelStore, domain: &Domain) -> Vec<usize> {
    let v_min = domain.min_volume();
    (0..store.n_local())
        .filter(|&i| store.volume[i] < v_min)
        .collect()
}

/// Owned parcels binned by containing cell, over the worker's cell block.
pub struct CellBins {
    x0: usize,
    y0: usize,
    wx: usize,
    wy: usize,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl CellBins {
    pub fn build(
        store: &ParcelStore,
        domain: &Domain,
        decomposition: &Decomposition,
        worker: usize,
    ) -> Result<Self> {
        let xr = decomposition.x_range(worker);
        let yr = decomposition.y_range(worker);
        let (wx, wy) = (xr.len(), yr.len());
        let nz = domain.cells()[2];
        let mut bins = Self {
            x0: xr.start,
            y0: yr.start,
            wx,
            wy,
            starts: vec![0; wx * wy * nz + 1],
            items: vec![0; store.n_local()],
        };
        let mut slot = Vec::with_capacity(store.n_local());
        for i in 0..store.n_local() {
            let c = domain.cell_of(store.position[i]);
            if !decomposition.owns(worker, c) {
                return Err(Error::InvalidInput(format!(
                    "parcel {} in cell {c:?} is not owned by worker {worker}",
                    store.gid[i]
                )));
            }
            let b = bins.bin(c);
            bins.starts[b + 1] += 1;
            slot.push(b);
        }
        for b in 1..bins.starts.len() {
            bins.starts[b] += bins.starts[b - 1];
        }
        let mut fill = bins.starts.clone();
        for (i, b) in slot.into_iter().enumerate() {
            bins.items[fill[b]] = i;
            fill[b] += 1;
        }
        Ok(bins)
    }

    fn bin(&self, c: Cell) -> usize {
        (c.i - self.x0) + self.wx * ((c.j - self.y0) + self.wy * c.k)
    }

    /// Parcels in an owned cell.
    pub fn parcels_in(&self, c: Cell) -> &[usize] {
        let b = self.bin(c);
        &self.items[self.starts[b]..self.starts[b + 1]]
    }
}

/// Workers other than `worker` owning a search cell of `position`.
pub fn copy_destinations(
    domain: &Domain,
    decomposition: &Decomposition,
    worker: usize,
    position: crate::domain::Vec3,
) -> Result<Vec<usize>> {
    let mut dests: Vec<usize> = Vec::with_capacity(3);
    for c in domain.stencil_of(position)?.as_slice() {
        let w = decomposition.owner_of_cell(c.i, c.j);
        if w != worker && !dests.contains(&w) {
            if !decomposition.is_neighbour(worker, w) {
                return Err(Error::Protocol(format!(
                    "worker {worker} would send to non-neighbour {w}"
                )));
            }
            dests.push(w);
        }
    }
    dests.sort_unstable();
    Ok(dests)
}

/// Candidate arrays before remote answers are folded in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provisional {
    pub arrays: CandidateArrays,
    pub evaluations: u64,
}

/// Searches this worker's cells for the closest parcel to each origin.
///
/// Origins may be owned small parcels or remote copies. Only cells owned by
/// `worker` are scanned; an origin with no candidate gets `dclo` equal to
/// the sentinel distance.
pub fn local_nearest(
    store: &ParcelStore,
    origins: &[usize],
    domain: &Domain,
    decomposition: &Decomposition,
    worker: usize,
    bins: &CellBins,
) -> Result<Provisional> {
    let sentinel = domain.sentinel_distance();
    let mut out = Provisional::default();
    for &s in origins {
        let p = store.position[s];
        let (mut best_d, mut best_gid, mut best) = (sentinel, u64::MAX, NO_CANDIDATE);
        for &c in domain.stencil_of(p)?.as_slice() {
            if !decomposition.owns(worker, c) {
                continue;
            }
            for &j in bins.parcels_in(c) {
                if j == s {
                    continue;
                }
                out.evaluations += 1;
                let d = domain.distance_sq(p, store.position[j]);
                if closer(d, store.gid[j], best_d, best_gid) {
                    (best_d, best_gid, best) = (d, store.gid[j], j);
                }
            }
        }
        out.arrays.push(s, best, worker, best_d, best_gid);
    }
    Ok(out)
}

/// A remote worker's answer for one of our small parcels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateReply {
    pub origin: usize,
    pub iclo: usize,
    pub gclo: u64,
    pub dclo: f64,
}

/// Folds remote answers into the owner's provisional arrays and drops small
/// parcels that found no candidate anywhere.
pub fn reduce_remote_candidates(
    mut local: CandidateArrays,
    replies: impl IntoIterator<Item = (usize, CandidateReply)>,
    domain: &Domain,
) -> Result<CandidateArrays> {
    for (from, r) in replies {
        let m = local.isma.binary_search(&r.origin).map_err(|_| {
            Error::Protocol(format!(
                "worker {from} replied for unknown small parcel {}",
                r.origin
            ))
        })?;
        if r.iclo != NO_CANDIDATE && closer(r.dclo, r.gclo, local.dclo[m], local.gclo[m]) {
            local.iclo[m] = r.iclo;
            local.rclo[m] = from;
            local.dclo[m] = r.dclo;
            local.gclo[m] = r.gclo;
        }
    }
    let sentinel = domain.sentinel_distance();
    let keep: Vec<bool> = local.dclo.iter().map(|&d| d < sentinel).collect();
    Ok(local.compact(&keep))
}

/// Marks dual links and returns the indegree of every owned parcel, given
/// the in-edges `(target, origin worker, origin index)` reported to us.
pub fn mark_dual_links(
    arrays: &mut CandidateArrays,
    in_edges: &[(usize, usize, usize)],
    n_local: usize,
) -> Result<Vec<u32>> {
    let mut indegree = vec![0u32; n_local];
    let mut sorted = in_edges.to_vec();
    sorted.sort_unstable();
    for &(t, w, s) in &sorted {
        *indegree.get_mut(t).ok_or_else(|| {
            Error::Protocol(format!("in-edge from {w}:{s} to unknown parcel {t}"))
        })? += 1;
    }
    for m in 0..arrays.len() {
        let key = (arrays.isma[m], arrays.rclo[m], arrays.iclo[m]);
        arrays.dual[m] = sorted.binary_search(&key).is_ok();
    }
    Ok(indegree)
}

/// Per-worker result of graph construction.
#[derive(Clone, Debug, Default)]
pub struct BuildOutput {
    pub candidates: CandidateArrays,
    pub indegree: Vec<u32>,
    pub evaluations: u64,
    pub n_small: usize,
}

enum BuildPhase {
    Send,
    Search,
    Reduce,
    Link,
    Finished,
}

/// Graph construction for one worker, driven by the runtime in four
/// exchange rounds: copies out, answers back, in-edge notices, done.
pub struct BuildProgram<'a> {
    domain: &'a Domain,
    decomposition: &'a Decomposition,
    store: &'a mut ParcelStore,
    phase: BuildPhase,
    small: Vec<usize>,
    bins: Option<CellBins>,
    local: CandidateArrays,
    own_in_edges: Vec<(usize, usize, usize)>,
    pub output: BuildOutput,
}

impl<'a> BuildProgram<'a> {
    pub fn new(
        domain: &'a Domain,
        decomposition: &'a Decomposition,
        store: &'a mut ParcelStore,
    ) -> Self {
        Self {
            domain,
            decomposition,
            store,
            phase: BuildPhase::Send,
            small: Vec::new(),
            bins: None,
            local: CandidateArrays::default(),
            own_in_edges: Vec::new(),
            output: BuildOutput::default(),
        }
    }

    fn send_copies(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<()> {
        let me = ctx.world_id();
        self.store.clear_remote();
        self.small = collect_small(self.store, self.domain);
        self.output.n_small = self.small.len();
        self.bins = Some(CellBins::build(self.store, self.domain, self.decomposition, me)?);
        for &s in &self.small {
            let p = self.store.position[s];
            for dest in copy_destinations(self.domain, self.decomposition, me, p)? {
                ctx.send(
                    dest,
                    Msg::SmallCopy {
                        gid: self.store.gid[s],
                        position: p,
                        volume: self.store.volume[s],
                        index: s,
                    },
                );
            }
        }
        Ok(())
    }

    fn search(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<()> {
        let me = ctx.world_id();
        for (src, msg) in ctx.take_inbox() {
            match msg {
                Msg::SmallCopy {
                    gid,
                    position,
                    volume,
                    index,
                } if self.decomposition.is_neighbour(me, src) => {
                    self.store.append_remote(
                        gid,
                        position,
                        volume,
                        Provenance {
                            worker: src,
                            index,
                        },
                    );
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "worker {me}: unexpected {other:?} from {src} during copy exchange"
                    )))
                }
            }
        }
        let n_local = self.store.n_local();
        let mut origins = self.small.clone();
        origins.extend(n_local..self.store.len());
        let bins = self.bins.as_ref().expect("bins built in send phase");
        let prov = local_nearest(self.store, &origins, self.domain, self.decomposition, me, bins)?;
        self.output.evaluations = prov.evaluations;

        let n_small = self.small.len();
        let all = prov.arrays;
        self.local = all.compact(&(0..all.len()).map(|m| m < n_small).collect::<Vec<_>>());
        for m in n_small..all.len() {
            let from = self.store.provenance(all.isma[m]).expect("remote entry");
            ctx.send(
                from.worker,
                Msg::Candidate {
                    origin: from.index,
                    iclo: all.iclo[m],
                    gclo: all.gclo[m],
                    dclo: all.dclo[m],
                },
            );
        }
        Ok(())
    }

    fn reduce(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<()> {
        let me = ctx.world_id();
        let mut replies = Vec::new();
        for (src, msg) in ctx.take_inbox() {
            match msg {
                Msg::Candidate {
                    origin,
                    iclo,
                    gclo,
                    dclo,
                } => replies.push((
                    src,
                    CandidateReply {
                        origin,
                        iclo,
                        gclo,
                        dclo,
                    },
                )),
                other => {
                    return Err(Error::Protocol(format!(
                        "worker {me}: unexpected {other:?} from {src} during reduction"
                    )))
                }
            }
        }
        let arrays =
            reduce_remote_candidates(std::mem::take(&mut self.local), replies, self.domain)?;
        for m in 0..arrays.len() {
            if arrays.rclo[m] == me {
                self.own_in_edges.push((arrays.iclo[m], me, arrays.isma[m]));
            } else {
                ctx.send(
                    arrays.rclo[m],
                    Msg::InEdge {
                        target: arrays.iclo[m],
                        origin: arrays.isma[m],
                        origin_gid: self.store.gid[arrays.isma[m]],
                    },
                );
            }
        }
        self.output.candidates = arrays;
        Ok(())
    }

    fn link(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<()> {
        let me = ctx.world_id();
        let mut in_edges = std::mem::take(&mut self.own_in_edges);
        for (src, msg) in ctx.take_inbox() {
            match msg {
                Msg::InEdge { target, origin, .. } => in_edges.push((target, src, origin)),
                other => {
                    return Err(Error::Protocol(format!(
                        "worker {me}: unexpected {other:?} from {src} during linking"
                    )))
                }
            }
        }
        self.output.indegree =
            mark_dual_links(&mut self.output.candidates, &in_edges, self.store.n_local())?;
        Ok(())
    }
}

impl WorkerProgram<Msg> for BuildProgram<'_> {
    fn step(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        match self.phase {
            BuildPhase::Send => {
                self.send_copies(ctx)?;
                self.phase = BuildPhase::Search;
                Ok(Yield::Exchange)
            }
            BuildPhase::Search => {
                self.search(ctx)?;
                self.phase = BuildPhase::Reduce;
                Ok(Yield::Exchange)
            }
            BuildPhase::Reduce => {
                self.reduce(ctx)?;
                self.phase = BuildPhase::Link;
                Ok(Yield::Exchange)
            }
            BuildPhase::Link => {
                self.link(ctx)?;
                self.phase = BuildPhase::Finished;
                Ok(Yield::Done)
            }
            BuildPhase::Finished => Ok(Yield::Done),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parcels::Parcel;

    fn dom() -> Domain {
        Domain::unit_cube(8).unwrap()
    }

    #[test]
    fn collect_small_examples() {
        let d = dom();
        let v = d.min_volume();
        let s: ParcelStore = [0.4, 1.2, 0.9]
            .iter()
            .enumerate()
            .map(|(i, f)| Parcel::at(i as u64, [0.1; 3], f * v))
            .collect();
        assert_eq!(collect_small(&s, &d), vec![0, 2]);
        let big: ParcelStore = (0..3).map(|i| Parcel::at(i, [0.1; 3], 2.0 * v)).collect();
        assert!(collect_small(&big, &d).is_empty());
    }

    #[test]
    fn collinear_nearest() {
        // brute force over the three pairs: |0 - 0.1| < |0 - 0.3|
        let d = dom();
        let dx = d.spacing()[0];
        let v = d.min_volume();
        let base = [0.3 * dx, 0.3 * dx, 0.3 * dx];
        let s: ParcelStore = [0.0, 0.1, 0.3]
            .iter()
            .enumerate()
            .map(|(i, off)| {
                Parcel::at(
                    i as u64,
                    [base[0] + off * dx, base[1], base[2]],
                    if i == 0 { 0.5 * v } else { 2.0 * v },
                )
            })
            .collect();
        let dec = Decomposition::new(&d, 1).unwrap();
        let bins = CellBins::build(&s, &d, &dec, 0).unwrap();
        let p = local_nearest(&s, &[0], &d, &dec, 0, &bins).unwrap();
        assert_eq!(p.arrays.iclo, vec![1]);
        assert!((p.arrays.dclo[0] - (0.1 * dx).powi(2)).abs() < 1e-15);
        assert_eq!(p.evaluations, 2);
    }

    #[test]
    fn equidistant_tie_goes_to_smaller_gid() {
        let d = dom();
        let v = d.min_volume();
        let c = [0.3, 0.3, 0.3];
        let s: ParcelStore = vec![
            Parcel::at(10, c, 0.5 * v),
            Parcel::at(7, [c[0] + 0.01, c[1], c[2]], v),
            Parcel::at(5, [c[0] - 0.01, c[1], c[2]], v),
        ]
        .into_iter()
        .collect();
        let dec = Decomposition::new(&d, 1).unwrap();
        let bins = CellBins::build(&s, &d, &dec, 0).unwrap();
        let p = local_nearest(&s, &[0], &d, &dec, 0, &bins).unwrap();
        // the shifted positions are not exactly symmetric in floating point
        let d1 = d.distance_sq(c, s.position[1]);
        let d2 = d.distance_sq(c, s.position[2]);
        let expect = if closer(d1, 7, d2, 5) { 1 } else { 2 };
        assert_eq!(p.arrays.iclo, vec![expect]);
        assert!(closer(1.0, 3, 1.0, 4));
        assert!(!closer(1.0, 4, 1.0, 3));
        assert!(closer(0.5, 9, 1.0, 3));
    }

    #[test]
    fn remote_with_no_local_candidate_gets_sentinel() {
        let d = dom();
        let dec = Decomposition::new(&d, 4).unwrap();
        // worker 0 owns x, y cells 0..4; its only parcel sits far away
        let mut s: ParcelStore = std::iter::once(Parcel::at(0, [0.2, 0.2, 0.5], 1.0)).collect();
        s.append_remote(
            99,
            [0.51, 0.1, 0.5],
            1e-6,
            Provenance {
                worker: 1,
                index: 0,
            },
        );
        let bins = CellBins::build(&s, &d, &dec, 0).unwrap();
        let p = local_nearest(&s, &[1], &d, &dec, 0, &bins).unwrap();
        assert_eq!(p.arrays.dclo, vec![3.0]);
        assert_eq!(p.arrays.iclo, vec![NO_CANDIDATE]);
    }

    #[test]
    fn reduction_keeps_global_minimum() {
        let d = dom();
        let mut local = CandidateArrays::default();
        local.push(4, 1, 0, 4e-4, 1);
        local.push(6, NO_CANDIDATE, 0, 3.0, u64::MAX);
        local.push(8, NO_CANDIDATE, 0, 3.0, u64::MAX);
        let replies = vec![
            (
                2,
                CandidateReply {
                    origin: 4,
                    iclo: 9,
                    gclo: 50,
                    dclo: 1e-4,
                },
            ),
            (
                3,
                CandidateReply {
                    origin: 6,
                    iclo: 2,
                    gclo: 51,
                    dclo: 2e-4,
                },
            ),
            (
                1,
                CandidateReply {
                    origin: 8,
                    iclo: NO_CANDIDATE,
                    gclo: u64::MAX,
                    dclo: 3.0,
                },
            ),
        ];
        let out = reduce_remote_candidates(local.clone(), replies, &d).unwrap();
        assert_eq!(out.isma, vec![4, 6]);
        assert_eq!(out.rclo, vec![2, 3]);
        assert_eq!(out.iclo, vec![9, 2]);

        let bad = vec![(
            1,
            CandidateReply {
                origin: 5,
                iclo: 0,
                gclo: 0,
                dclo: 0.0,
            },
        )];
        assert!(matches!(
            reduce_remote_candidates(local, bad, &d),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn copy_destination_counts() {
        let d = dom();
        let dec = Decomposition::new(&d, 4).unwrap();
        let h = d.spacing()[0];
        // stencil fully inside worker 0
        assert!(copy_destinations(&d, &dec, 0, [2.0 * h, 2.0 * h, 0.5]).unwrap().is_empty());
        // crosses the x boundary at cell 4
        assert_eq!(
            copy_destinations(&d, &dec, 0, [3.9 * h, 2.0 * h, 0.5]).unwrap(),
            vec![1]
        );
        // corner: x and y boundaries
        assert_eq!(
            copy_destinations(&d, &dec, 0, [3.9 * h, 3.9 * h, 0.5]).unwrap(),
            vec![1, 2, 3]
        );
        // periodic corner at the origin
        assert_eq!(
            copy_destinations(&d, &dec, 0, [0.1 * h, 0.1 * h, 0.5]).unwrap(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn dual_marking_and_indegree() {
        let mut a = CandidateArrays::default();
        a.push(0, 3, 1, 0.1, 30);
        a.push(1, 2, 0, 0.1, 2);
        let in_edges = vec![(0, 1, 3), (2, 0, 1), (0, 2, 5)];
        let deg = mark_dual_links(&mut a, &in_edges, 3).unwrap();
        assert_eq!(a.dual, vec![true, false]);
        assert_eq!(deg, vec![2, 0, 1]);
        assert!(mark_dual_links(&mut a, &[(7, 0, 0)], 3).is_err());
    }

    #[test]
    fn compact_is_a_stable_filter() {
        let mut a = CandidateArrays::default();
        for m in 0..3 {
            a.push(m, m + 10, 0, m as f64, m as u64);
        }
        assert_eq!(a.compact(&[true; 3]), a);
        assert!(a.compact(&[false; 3]).is_empty());
        let c = a.compact(&[true, false, true]);
        assert_eq!(c.isma, vec![0, 2]);
        assert_eq!(c.iclo, vec![10, 12]);
    }

    #[test]
    fn csv_dump() {
        let mut a = CandidateArrays::default();
        a.push(1, 2, 3, 0.5, 9);
        let mut out = Vec::new();
        a.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "isma,iclo,rclo,dclo\n1,2,3,0.5\n");
    }
}
