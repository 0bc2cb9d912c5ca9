//! One clustering step over a decomposed population: build the graph on
//! every worker, resolve it on the workers that hold small parcels, then
//! merge each group on the owner of its root and move merged parcels that
//! left their owner's subdomain.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::domain::{Decomposition, Domain};
use crate::error::{Error, Result};
use crate::graph::Partition;
use crate::message::Msg;
use crate::nng::{BuildOutput, BuildProgram, CandidateArrays};
use crate::parcels::{merge_group, Parcel, ParcelStore};
use crate::resolve::{
    extract_merge_groups, resolve, DualTieBreak, FlagWindows, ResolveCounters, ResolveInput,
    TraceEvent,
};
use crate::runtime::{Runtime, Schedule, WorkerCtx, WorkerProgram, Yield};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub schedule: Schedule,
    pub checking: bool,
    pub tie_break: DualTieBreak,
    pub trace: bool,
}

/// Min, mean and max of a per-worker quantity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        Self {
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            avg: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Per-phase wall-clock seconds across workers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub build: Spread,
    pub resolve: Spread,
    pub merge: Spread,
}

/// What one clustering step found.
#[derive(Clone, Debug, Default)]
pub struct GroupsReport {
    pub partition: Partition,
    /// World ids of the workers that took part in resolution.
    pub participants: Vec<usize>,
    /// Per participant, in the same order.
    pub counters: Vec<ResolveCounters>,
    pub n_small: usize,
    pub n_edges: usize,
    pub evaluations: u64,
    pub trace: Vec<TraceEvent>,
    pub build: Vec<BuildOutput>,
}

#[derive(Clone, Debug, Default)]
pub struct StepReport {
    pub groups: GroupsReport,
    pub n_before: usize,
    pub n_after: usize,
    pub times: PhaseTimes,
}

/// A decomposed parcel population with its runtime.
pub struct Cluster {
    domain: Domain,
    decomposition: Decomposition,
    stores: Vec<ParcelStore>,
    rt: Runtime<Msg>,
    options: EngineOptions,
}

impl Cluster {
    pub fn new(domain: Domain, n_workers: usize, options: EngineOptions) -> Result<Self> {
        let decomposition = Decomposition::new(&domain, n_workers)?;
        Ok(Self {
            rt: Runtime::new(n_workers)
                .with_schedule(options.schedule)
                .with_checking(options.checking),
            stores: vec![ParcelStore::new(); n_workers],
            domain,
            decomposition,
            options,
        })
    }

    /// Normalises positions and hands each parcel to the owner of its cell.
    pub fn from_parcels(
        domain: Domain,
        n_workers: usize,
        parcels: impl IntoIterator<Item = Parcel>,
        options: EngineOptions,
    ) -> Result<Self> {
        let mut c = Self::new(domain, n_workers, options)?;
        for mut p in parcels {
            p.position = c.domain.normalise(p.position)?;
            let cell = c.domain.cell_of(p.position);
            c.stores[c.decomposition.owner_of_cell(cell.i, cell.j)].push(p);
        }
        Ok(c)
    }

    /// Samples `n_per_cell` parcels per cell, each worker in its own cells.
    pub fn sampled(
        domain: Domain,
        n_workers: usize,
        n_per_cell: usize,
        seed: u64,
        options: EngineOptions,
    ) -> Result<Self> {
        let mut c = Self::new(domain, n_workers, options)?;
        for w in 0..n_workers {
            c.stores[w] =
                crate::parcels::sample_owned(&c.domain, &c.decomposition, w, n_per_cell, seed)?;
        }
        Ok(c)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn decomposition(&self) -> &Decomposition {
        &self.decomposition
    }

    pub fn stores(&self) -> &[ParcelStore] {
        &self.stores
    }

    pub fn runtime(&self) -> &Runtime<Msg> {
        &self.rt
    }

    pub fn n_parcels(&self) -> usize {
        self.stores.iter().map(ParcelStore::n_local).sum()
    }

    /// Every owned parcel, sorted by gid.
    pub fn parcels(&self) -> Vec<Parcel> {
        let mut all: Vec<Parcel> = self.stores.iter().flat_map(|s| s.parcels()).collect();
        all.sort_by_key(|p| p.gid);
        all
    }

    /// Builds and resolves the graph without touching the parcels.
    pub fn find_groups(&mut self) -> Result<GroupsReport> {
        self.find_groups_timed().map(|(r, _, _)| r)
    }

    fn find_groups_timed(&mut self) -> Result<(GroupsReport, Vec<CandidateArrays>, [Vec<f64>; 2])> {
        let world = self.rt.world();
        let n = self.rt.size();
        let busy = |rt: &Runtime<Msg>| -> Vec<Duration> { (0..n).map(|w| rt.busy_time(w)).collect() };

        let t0 = busy(&self.rt);
        let mut programs: Vec<BuildProgram> = self
            .stores
            .iter_mut()
            .map(|s| BuildProgram::new(&self.domain, &self.decomposition, s))
            .collect();
        self.rt.execute(&world, &mut programs)?;
        let build: Vec<BuildOutput> = programs.into_iter().map(|p| p.output).collect();
        let t1 = busy(&self.rt);

        let participates: Vec<bool> = (0..n)
            .map(|w| build[w].n_small > 0 || self.stores[w].n_remote() > 0)
            .collect();
        let mut report = GroupsReport {
            n_small: build.iter().map(|b| b.n_small).sum(),
            n_edges: build.iter().map(|b| b.candidates.len()).sum(),
            evaluations: build.iter().map(|b| b.evaluations).sum(),
            ..Default::default()
        };

        let mut kept = vec![CandidateArrays::default(); n];
        if let Some(sub) = world.split_subgroup(&participates) {
            let inputs: Vec<ResolveInput> = sub
                .members()
                .iter()
                .map(|&w| ResolveInput {
                    origin_gid: build[w]
                        .candidates
                        .isma
                        .iter()
                        .map(|&i| self.stores[w].gid[i])
                        .collect(),
                    candidates: build[w].candidates.clone(),
                    store_len: self.stores[w].len(),
                })
                .collect();
            let lens: Vec<usize> = inputs.iter().map(|i| i.store_len).collect();
            let windows = FlagWindows::allocate(&mut self.rt, &sub, &lens);
            let outputs = resolve(
                &mut self.rt,
                &sub,
                windows,
                &inputs,
                self.options.tie_break,
                self.options.trace,
            );
            windows.free(&mut self.rt);
            let outputs = outputs?;
            report.partition = extract_merge_groups(&inputs, &outputs)?;
            report.participants = sub.members().to_vec();
            report.counters = outputs.iter().map(|o| o.counters).collect();
            report.trace = outputs.iter().flat_map(|o| o.trace.iter().copied()).collect();
            report.trace.sort_unstable();
            for (&w, (input, output)) in sub.members().iter().zip(inputs.iter().zip(&outputs)) {
                kept[w] = input.candidates.compact(&output.keep_mask());
            }
        }
        let t2 = busy(&self.rt);
        report.build = build;
        let secs = |a: &[Duration], b: &[Duration]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| (*y - *x).as_secs_f64()).collect()
        };
        Ok((report, kept, [secs(&t0, &t1), secs(&t1, &t2)]))
    }

    /// Finds the groups and merges them.
    pub fn step(&mut self) -> Result<StepReport> {
        let n = self.rt.size();
        let n_before = self.n_parcels();
        let (groups, kept, [build_t, resolve_t]) = self.find_groups_timed()?;

        let t0: Vec<Duration> = (0..n).map(|w| self.rt.busy_time(w)).collect();
        let world = self.rt.world();
        let mut programs: Vec<MergeProgram> = self
            .stores
            .iter_mut()
            .zip(&kept)
            .map(|(store, edges)| MergeProgram {
                domain: &self.domain,
                decomposition: &self.decomposition,
                store,
                edges,
                phase: 0,
                local_leaves: Vec::new(),
            })
            .collect();
        self.rt.execute(&world, &mut programs)?;
        drop(programs);
        let merge_t: Vec<f64> = (0..n)
            .map(|w| (self.rt.busy_time(w) - t0[w]).as_secs_f64())
            .collect();

        let n_after = self.n_parcels();
        if n_before - n_after != groups.partition.merges() as usize {
            return Err(Error::Internal(format!(
                "{} parcels removed but the partition implies {}",
                n_before - n_after,
                groups.partition.merges()
            )));
        }
        Ok(StepReport {
            groups,
            n_before,
            n_after,
            times: PhaseTimes {
                build: Spread::of(build_t),
                resolve: Spread::of(resolve_t),
                merge: Spread::of(merge_t),
            },
        })
    }
}

/// Applies the kept edges of one worker: ships leaves to their roots,
/// merges, and migrates merged parcels that changed owner.
struct MergeProgram<'a> {
    domain: &'a Domain,
    decomposition: &'a Decomposition,
    store: &'a mut ParcelStore,
    edges: &'a CandidateArrays,
    phase: u8,
    local_leaves: Vec<(usize, Parcel)>,
}

impl MergeProgram<'_> {
    fn ship(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<()> {
        let me = ctx.world_id();
        for m in 0..self.edges.len() {
            let parcel = self.store.parcel(self.edges.isma[m]);
            let (owner, root) = (self.edges.rclo[m], self.edges.iclo[m]);
            if owner == me {
                self.local_leaves.push((root, parcel));
            } else if self.decomposition.is_neighbour(me, owner) {
                ctx.send(owner, Msg::Leaf { root, parcel });
            } else {
                return Err(Error::Protocol(format!(
                    "worker {me}: root owner {owner} is not a neighbour"
                )));
            }
        }
        Ok(())
    }

    fn merge(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<()> {
        let me = ctx.world_id();
        let mut by_root: BTreeMap<usize, Vec<Parcel>> = BTreeMap::new();
        for (root, p) in self.local_leaves.drain(..) {
            by_root.entry(root).or_default().push(p);
        }
        for (src, msg) in ctx.take_inbox() {
            match msg {
                Msg::Leaf { root, parcel } => by_root.entry(root).or_default().push(parcel),
                other => {
                    return Err(Error::Protocol(format!(
                        "worker {me}: unexpected {other:?} from {src} during merge"
                    )))
                }
            }
        }
        let mut keep = vec![true; self.store.n_local()];
        for &i in &self.edges.isma {
            keep[i] = false;
        }
        for (root, mut members) in by_root {
            if root >= self.store.n_local() {
                return Err(Error::Protocol(format!("worker {me}: unknown root {root}")));
            }
            members.push(self.store.parcel(root));
            let merged = merge_group(&members, self.domain)?;
            let cell = self.domain.cell_of(merged.position);
            let owner = self.decomposition.owner_of_cell(cell.i, cell.j);
            if owner == me {
                self.store.set(root, merged);
            } else if self.decomposition.is_neighbour(me, owner) {
                keep[root] = false;
                ctx.send(owner, Msg::Migrate(merged));
            } else {
                return Err(Error::Protocol(format!(
                    "worker {me}: merged parcel moved to non-neighbour {owner}"
                )));
            }
        }
        self.store.retain_local(&keep);
        Ok(())
    }

    fn receive(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<()> {
        let me = ctx.world_id();
        for (src, msg) in ctx.take_inbox() {
            match msg {
                Msg::Migrate(p) => self.store.push(p),
                other => {
                    return Err(Error::Protocol(format!(
                        "worker {me}: unexpected {other:?} from {src} during migration"
                    )))
                }
            }
        }
        Ok(())
    }
}

impl WorkerProgram<Msg> for MergeProgram<'_> {
    fn step(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        self.phase += 1;
        match self.phase {
            1 => {
                self.ship(ctx)?;
                Ok(Yield::Exchange)
            }
            2 => {
                self.merge(ctx)?;
                Ok(Yield::Exchange)
            }
            3 => {
                self.receive(ctx)?;
                Ok(Yield::Done)
            }
            _ => Ok(Yield::Done),
        }
    }
}
