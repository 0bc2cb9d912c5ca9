//! Two-stage resolution of the nearest-neighbour graph into star-shaped
//! merge groups, using only flag windows, barriers and all-reduces.
//!
//! Stage 1 repeats four epochs until an iteration changes nothing:
//!
//! ```text
//! A  origins store leaf(s) = true, put available(t) = true     barrier
//! B  origins put leaf(t) = false                               barrier
//! C  non-leaf origins put available(t) = false                 barrier
//! D  leaf s with available t: finalise s->t, merged(t) = true
//!    available non-leaf s: remove s's edge                     all-reduce
//! ```
//!
//! Stage 2 handles the dual pairs that remain:
//!
//! ```text
//! S1 leaf origins put available(t) = true                      barrier
//! S2 a dual endpoint with a leaf attached removes its edge;
//!    pairs where neither side has one are isolated             barrier
//! S3 one side of each isolated pair removes its edge
//! ```
//!
//! Every epoch writes each flag with one value only, so the result does not
//! depend on the order in which workers run.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Partition;
use crate::message::Msg;
use crate::nng::CandidateArrays;
use crate::runtime::{Counters, Runtime, WindowId, WorkerCtx, WorkerGroup, WorkerProgram, Yield};

/// The three flag arrays each worker exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlagWindows {
    pub available: WindowId,
    pub leaf: WindowId,
    pub merged: WindowId,
}

impl FlagWindows {
    /// Zeroed windows over `group`, `lens[rank]` slots on each member.
    pub fn allocate<M: Send>(rt: &mut Runtime<M>, group: &WorkerGroup, lens: &[usize]) -> Self {
        Self {
            available: rt.create_window(group, "l_available", lens),
            leaf: rt.create_window(group, "l_leaf", lens),
            merged: rt.create_window(group, "l_merged", lens),
        }
    }

    pub fn free<M: Send>(self, rt: &mut Runtime<M>) {
        rt.free_window(self.available);
        rt.free_window(self.leaf);
        rt.free_window(self.merged);
    }

    fn all(&self) -> [WindowId; 3] {
        [self.available, self.leaf, self.merged]
    }
}

/// Which side of an isolated dual pair gives up its edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DualTieBreak {
    /// The endpoint with the smaller gid removes its edge.
    #[default]
    LowerGid,
    /// The endpoint on the smaller worker id removes its edge; on the same
    /// worker, the smaller local index.
    LowerRank,
    /// The endpoint with the larger gid removes its edge.
    HigherGid,
}

impl std::str::FromStr for DualTieBreak {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lower-gid" => Ok(Self::LowerGid),
            "lower-rank" => Ok(Self::LowerRank),
            "higher-gid" => Ok(Self::HigherGid),
            _ => Err(format!("unknown tie-break {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeFate {
    Active,
    Finalized { iteration: u32 },
    Removed { iteration: u32, stage: u8 },
}

impl EdgeFate {
    pub fn is_kept(self) -> bool {
        !matches!(self, EdgeFate::Removed { .. })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolveCounters {
    pub n_barrier: u64,
    pub n_allreduce: u64,
    pub n_rma_put: u64,
    pub n_rma_get: u64,
    pub n_iterations: u64,
}

impl ResolveCounters {
    fn from_runtime(c: Counters, n_iterations: u64) -> Self {
        Self {
            n_barrier: c.barriers,
            n_allreduce: c.allreduces,
            n_rma_put: c.puts,
            n_rma_get: c.gets,
            n_iterations,
        }
    }
}

/// One removed or finalised edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TraceEvent {
    pub stage: u8,
    pub iteration: u32,
    pub finalized: bool,
    pub origin: u64,
    pub target: u64,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let action = if self.finalized { "finalize" } else { "remove" };
        write!(
            f,
            "stage{} iter{} {action} {} -> {}",
            self.stage, self.iteration, self.origin, self.target
        )
    }
}

/// What one worker brings to a resolve call.
#[derive(Clone, Debug, Default)]
pub struct ResolveInput {
    pub candidates: CandidateArrays,
    /// gid of each entry's origin.
    pub origin_gid: Vec<u64>,
    /// Local plus remote parcel count; the flag windows must be this long.
    pub store_len: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ResolveOutput {
    pub fate: Vec<EdgeFate>,
    pub counters: ResolveCounters,
    pub trace: Vec<TraceEvent>,
}

impl ResolveOutput {
    pub fn keep_mask(&self) -> Vec<bool> {
        self.fate.iter().map(|f| f.is_kept()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Start,
    LeafTargets,
    Filter,
    Identify,
    AfterCount,
    Duals,
    Isolated,
    Finished,
}

pub struct ResolveProgram<'a> {
    input: &'a ResolveInput,
    win: FlagWindows,
    tie: DualTieBreak,
    tracing: bool,
    phase: Phase,
    iteration: u32,
    leaf: Vec<bool>,
    isolated: Vec<bool>,
    pub fate: Vec<EdgeFate>,
    pub trace: Vec<TraceEvent>,
}

impl<'a> ResolveProgram<'a> {
    pub fn new(input: &'a ResolveInput, win: FlagWindows, tie: DualTieBreak, tracing: bool) -> Self {
        let n = input.candidates.len();
        Self {
            input,
            win,
            tie,
            tracing,
            phase: Phase::Start,
            iteration: 0,
            leaf: vec![false; n],
            isolated: vec![false; n],
            fate: vec![EdgeFate::Active; n],
            trace: Vec::new(),
        }
    }

    pub fn n_iterations(&self) -> u32 {
        self.iteration
    }

    fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.fate.len()).filter(|&m| self.fate[m] == EdgeFate::Active)
    }

    fn settle(&mut self, m: usize, fate: EdgeFate) {
        self.fate[m] = fate;
        if self.tracing {
            let (stage, iteration, finalized) = match fate {
                EdgeFate::Finalized { iteration } => (1, iteration, true),
                EdgeFate::Removed { iteration, stage } => (stage, iteration, false),
                EdgeFate::Active => return,
            };
            self.trace.push(TraceEvent {
                stage,
                iteration,
                finalized,
                origin: self.input.origin_gid[m],
                target: self.input.candidates.gclo[m],
            });
        }
    }

    fn epoch_a(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        self.iteration += 1;
        let c = &self.input.candidates;
        for m in self.active().collect::<Vec<_>>() {
            let s = c.isma[m];
            if ctx.load(self.win.merged, s)? {
                return Err(Error::Internal(format!(
                    "worker {}: merged parcel {s} still has an active edge",
                    ctx.world_id()
                )));
            }
            ctx.store(self.win.leaf, s, true)?;
            ctx.put(self.win.available, c.rclo[m], c.iclo[m], true)?;
        }
        self.phase = Phase::LeafTargets;
        Ok(Yield::Barrier)
    }

    fn epoch_b(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        let c = &self.input.candidates;
        for m in self.active() {
            ctx.put(self.win.leaf, c.rclo[m], c.iclo[m], false)?;
        }
        self.phase = Phase::Filter;
        Ok(Yield::Barrier)
    }

    fn epoch_c(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        let c = &self.input.candidates;
        for m in self.active().collect::<Vec<_>>() {
            self.leaf[m] = ctx.load(self.win.leaf, c.isma[m])?;
            if !self.leaf[m] {
                ctx.put(self.win.available, c.rclo[m], c.iclo[m], false)?;
            }
        }
        self.phase = Phase::Identify;
        Ok(Yield::Barrier)
    }

    fn epoch_d(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        let c = &self.input.candidates;
        let mut changed = 0i64;
        for m in self.active().collect::<Vec<_>>() {
            let (s, t, it) = (c.isma[m], (c.rclo[m], c.iclo[m]), self.iteration);
            if self.leaf[m] {
                if ctx.get(self.win.available, t.0, t.1)? {
                    ctx.store(self.win.merged, s, true)?;
                    ctx.put(self.win.merged, t.0, t.1, true)?;
                    self.settle(m, EdgeFate::Finalized { iteration: it });
                    changed += 1;
                }
            } else if !c.dual[m] && ctx.load(self.win.available, s)? {
                self.settle(
                    m,
                    EdgeFate::Removed {
                        iteration: it,
                        stage: 1,
                    },
                );
                changed += 1;
            }
        }
        self.phase = Phase::AfterCount;
        Ok(Yield::Allreduce(changed))
    }

    fn stage2_mark(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        let c = &self.input.candidates;
        for m in self.active().collect::<Vec<_>>() {
            if self.leaf[m] {
                ctx.put(self.win.available, c.rclo[m], c.iclo[m], true)?;
            }
        }
        self.phase = Phase::Duals;
        Ok(Yield::Barrier)
    }

    fn stage2_duals(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        let c = &self.input.candidates;
        let me = ctx.world_id();
        for m in self.active().collect::<Vec<_>>() {
            if self.leaf[m] {
                continue;
            }
            let (s, t) = (c.isma[m], (c.rclo[m], c.iclo[m]));
            if !c.dual[m] {
                // a longer cycle; the stencil search is not symmetric
                self.settle(
                    m,
                    EdgeFate::Removed {
                        iteration: self.iteration,
                        stage: 2,
                    },
                );
                continue;
            }
            let own = ctx.load(self.win.available, s)?;
            if ctx.get(self.win.leaf, t.0, t.1)? {
                return Err(Error::Internal(format!(
                    "worker {me}: dual partner of {s} is marked as a leaf"
                )));
            }
            let theirs = ctx.get(self.win.available, t.0, t.1)?;
            if own {
                self.settle(
                    m,
                    EdgeFate::Removed {
                        iteration: self.iteration,
                        stage: 2,
                    },
                );
            } else if !theirs {
                self.isolated[m] = true;
            }
        }
        self.phase = Phase::Isolated;
        Ok(Yield::Barrier)
    }

    fn stage2_isolated(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        let c = &self.input.candidates;
        let me = ctx.world_id();
        for m in 0..self.fate.len() {
            if !self.isolated[m] {
                continue;
            }
            let gs = self.input.origin_gid[m];
            let removes = match self.tie {
                DualTieBreak::LowerGid => gs < c.gclo[m],
                DualTieBreak::HigherGid => gs > c.gclo[m],
                DualTieBreak::LowerRank => (me, c.isma[m]) < (c.rclo[m], c.iclo[m]),
            };
            if removes {
                self.settle(
                    m,
                    EdgeFate::Removed {
                        iteration: self.iteration,
                        stage: 2,
                    },
                );
            }
        }
        self.phase = Phase::Finished;
        Ok(Yield::Done)
    }
}

impl WorkerProgram<Msg> for ResolveProgram<'_> {
    fn step(&mut self, ctx: &mut WorkerCtx<'_, Msg>) -> Result<Yield> {
        match self.phase {
            Phase::Start => {
                for w in self.win.all() {
                    ctx.lock(w)?;
                }
                self.epoch_a(ctx)
            }
            Phase::LeafTargets => self.epoch_b(ctx),
            Phase::Filter => self.epoch_c(ctx),
            Phase::Identify => self.epoch_d(ctx),
            Phase::AfterCount => match ctx.allreduce_result() {
                Some(0) => self.stage2_mark(ctx),
                Some(_) => self.epoch_a(ctx),
                None => Err(Error::Internal("all-reduce result missing".into())),
            },
            Phase::Duals => self.stage2_duals(ctx),
            Phase::Isolated => {
                let y = self.stage2_isolated(ctx)?;
                for w in self.win.all() {
                    ctx.unlock(w)?;
                }
                Ok(y)
            }
            Phase::Finished => Ok(Yield::Done),
        }
    }
}

/// Resolves the graph held in `inputs[rank]` on the members of `group`.
///
/// The windows must have been allocated over `group`, each member's array at
/// least `store_len` long.
pub fn resolve(
    rt: &mut Runtime<Msg>,
    group: &WorkerGroup,
    windows: FlagWindows,
    inputs: &[ResolveInput],
    tie: DualTieBreak,
    tracing: bool,
) -> Result<Vec<ResolveOutput>> {
    if inputs.len() != group.size() {
        return Err(Error::InvalidInput(format!(
            "{} inputs for a group of {}",
            inputs.len(),
            group.size()
        )));
    }
    for (rank, input) in inputs.iter().enumerate() {
        let w = group.world_id(rank);
        for id in windows.all() {
            let len = rt.window_len(id, w).ok_or_else(|| {
                Error::InvalidInput(format!("worker {w} is not part of the flag windows"))
            })?;
            if len < input.store_len {
                return Err(Error::InvalidInput(format!(
                    "flag window on worker {w} has {len} slots for {} parcels",
                    input.store_len
                )));
            }
        }
        if input.origin_gid.len() != input.candidates.len() {
            return Err(Error::InvalidInput("origin gids do not match candidates".into()));
        }
    }
    let before: Vec<Counters> = group.members().iter().map(|&w| rt.counters(w)).collect();
    let mut programs: Vec<ResolveProgram> = inputs
        .iter()
        .map(|i| ResolveProgram::new(i, windows, tie, tracing))
        .collect();
    rt.execute(group, &mut programs)?;
    Ok(programs
        .into_iter()
        .zip(group.members())
        .zip(before)
        .map(|((p, &w), b)| ResolveOutput {
            counters: ResolveCounters::from_runtime(
                rt.counters(w).since(&b),
                u64::from(p.iteration),
            ),
            fate: p.fate,
            trace: p.trace,
        })
        .collect())
}

/// Drops removed edges, keeping the survivors dense and in order.
pub fn compact(candidates: &CandidateArrays, output: &ResolveOutput) -> CandidateArrays {
    candidates.compact(&output.keep_mask())
}

/// Kept edges as `(origin gid, target gid)`.
pub fn kept_edges(input: &ResolveInput, output: &ResolveOutput) -> Vec<(u64, u64)> {
    (0..input.candidates.len())
        .filter(|&m| output.fate[m].is_kept())
        .map(|m| (input.origin_gid[m], input.candidates.gclo[m]))
        .collect()
}

/// Gathers every worker's kept edges into the merge partition.
pub fn extract_merge_groups(inputs: &[ResolveInput], outputs: &[ResolveOutput]) -> Result<Partition> {
    Partition::from_kept_edges(
        inputs
            .iter()
            .zip(outputs)
            .flat_map(|(i, o)| kept_edges(i, o)),
    )
}
