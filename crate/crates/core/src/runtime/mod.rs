//! A deterministic in-process stand-in for a message-passing runtime.
//!
//! Workers are state machines implementing [`WorkerProgram`]. The executor
//! steps every member of a group until it yields a synchronisation point
//! ([`Yield`]); once all members have yielded the same kind, the point
//! completes and the next round starts. Effects cross workers only through
//! flag windows (visible at the next synchronisation point) and two-sided
//! messages (delivered at the next [`Yield::Exchange`]).
//!
//! Windows follow passive-target semantics: each origin opens and closes its
//! own access epoch with [`WorkerCtx::lock`] / [`WorkerCtx::unlock`], and
//! the owner takes no part. Storage is unified: there is one authoritative
//! array per owner, so an origin always reads back its own earlier writes.
//!
//! In checking mode every window slot records who wrote which value and who
//! read it between two synchronisation points; differing writes, or a read
//! of a slot another worker wrote in the same epoch, abort with
//! [`RuntimeError::Race`].

mod group;
mod window;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use group::WorkerGroup;
use window::Window;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RaceKind {
    ConflictingWrites,
    ReadAfterForeignWrite,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("window {window}: index {index} out of range for worker {target} (len {len})")]
    OutOfBounds {
        window: String,
        target: usize,
        index: usize,
        len: usize,
    },
    #[error("window {window}: worker {origin} accessed it outside an open epoch")]
    EpochClosed { window: String, origin: usize },
    #[error("window {window}: worker {target} is not part of the window group")]
    InvalidTarget { window: String, target: usize },
    #[error("unknown window id {0}")]
    UnknownWindow(usize),
    #[error("race on window {window}, worker {owner} slot {index}: {kind:?}")]
    Race {
        window: String,
        owner: usize,
        index: usize,
        kind: RaceKind,
    },
    #[error("deadlock: workers {waiting:?} wait while {finished:?} have finished")]
    Deadlock {
        waiting: Vec<usize>,
        finished: Vec<usize>,
    },
    #[error("step budget of {0} synchronisation rounds exhausted")]
    StepBudget(usize),
    #[error("collective mismatch: workers yielded {0}")]
    CollectiveMismatch(String),
    #[error("message from worker {src} to non-member {dest}")]
    Undeliverable { src: usize, dest: usize },
}

/// A synchronisation point reached by a worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Yield {
    Barrier,
    Allreduce(i64),
    /// Completes a round of two-sided messages.
    Exchange,
    Done,
}

impl Yield {
    fn kind(self) -> &'static str {
        match self {
            Yield::Barrier => "barrier",
            Yield::Allreduce(_) => "allreduce",
            Yield::Exchange => "exchange",
            Yield::Done => "done",
        }
    }
}

/// Order in which the executor steps the workers of a round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    #[default]
    Sequential,
    Reverse,
    /// A fresh random permutation every round.
    Shuffled(u64),
    /// Rayon pool; sequential when built without the `parallel` feature.
    Parallel,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sequential" => Ok(Schedule::Sequential),
            "reverse" => Ok(Schedule::Reverse),
            "parallel" => Ok(Schedule::Parallel),
            _ => s
                .strip_prefix("shuffled:")
                .and_then(|seed| seed.parse().ok())
                .map(Schedule::Shuffled)
                .ok_or_else(|| format!("unknown schedule {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub puts: u64,
    pub gets: u64,
    pub barriers: u64,
    pub allreduces: u64,
    pub msgs: u64,
}

impl Counters {
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            puts: self.puts - earlier.puts,
            gets: self.gets - earlier.gets,
            barriers: self.barriers - earlier.barriers,
            allreduces: self.allreduces - earlier.allreduces,
            msgs: self.msgs - earlier.msgs,
        }
    }
}

/// One row of the exported counter board.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterRecord {
    pub worker: usize,
    pub puts: u64,
    pub gets: u64,
    pub barriers: u64,
    pub allreduces: u64,
    pub msgs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowId(usize);

struct WorkerLocal<M> {
    counters: Counters,
    open: Vec<bool>,
    outbox: Vec<(usize, M)>,
    inbox: Vec<(usize, M)>,
    allreduce: Option<i64>,
    busy: Duration,
}

impl<M> WorkerLocal<M> {
    fn new() -> Self {
        Self {
            counters: Counters::default(),
            open: Vec::new(),
            outbox: Vec::new(),
            inbox: Vec::new(),
            allreduce: None,
            busy: Duration::ZERO,
        }
    }
}

/// A worker's view of the runtime while it is being stepped.
pub struct WorkerCtx<'a, M> {
    world: usize,
    group: &'a WorkerGroup,
    windows: &'a [Option<Window>],
    local: &'a mut WorkerLocal<M>,
}

impl<M> WorkerCtx<'_, M> {
    pub fn world_id(&self) -> usize {
        self.world
    }

    pub fn group(&self) -> &WorkerGroup {
        self.group
    }

    fn window(&self, id: WindowId) -> Result<&Window, RuntimeError> {
        self.windows
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or(RuntimeError::UnknownWindow(id.0))
    }

    fn check_open(&self, id: WindowId) -> Result<&Window, RuntimeError> {
        let w = self.window(id)?;
        if !self.local.open.get(id.0).copied().unwrap_or(false) {
            return Err(RuntimeError::EpochClosed {
                window: w.name.clone(),
                origin: self.world,
            });
        }
        Ok(w)
    }

    /// Opens a passive-target access epoch on `id`.
    pub fn lock(&mut self, id: WindowId) -> Result<(), RuntimeError> {
        self.window(id)?;
        if self.local.open.len() <= id.0 {
            self.local.open.resize(id.0 + 1, false);
        }
        self.local.open[id.0] = true;
        Ok(())
    }

    pub fn unlock(&mut self, id: WindowId) -> Result<(), RuntimeError> {
        self.window(id)?;
        if let Some(o) = self.local.open.get_mut(id.0) {
            *o = false;
        }
        Ok(())
    }

    /// Writes `value` into slot `index` of `target`'s array.
    pub fn put(
        &mut self,
        id: WindowId,
        target: usize,
        index: usize,
        value: bool,
    ) -> Result<(), RuntimeError> {
        self.check_open(id)?.write(self.world, target, index, value)?;
        if target != self.world {
            self.local.counters.puts += 1;
        }
        Ok(())
    }

    pub fn get(&mut self, id: WindowId, target: usize, index: usize) -> Result<bool, RuntimeError> {
        let v = self.check_open(id)?.read(self.world, target, index)?;
        if target != self.world {
            self.local.counters.gets += 1;
        }
        Ok(v)
    }

    /// Owner-side store into its own array; needs no epoch and is not an
    /// RMA operation, but is still subject to race checking.
    pub fn store(&mut self, id: WindowId, index: usize, value: bool) -> Result<(), RuntimeError> {
        self.window(id)?.write(self.world, self.world, index, value)
    }

    pub fn load(&mut self, id: WindowId, index: usize) -> Result<bool, RuntimeError> {
        self.window(id)?.read(self.world, self.world, index)
    }

    /// Two-sided message, delivered at the next [`Yield::Exchange`].
    pub fn send(&mut self, dest: usize, msg: M) {
        self.local.counters.msgs += 1;
        self.local.outbox.push((dest, msg));
    }

    /// Messages delivered at the last exchange, ordered by source.
    pub fn take_inbox(&mut self) -> Vec<(usize, M)> {
        std::mem::take(&mut self.local.inbox)
    }

    /// Result of the most recent completed all-reduce.
    pub fn allreduce_result(&self) -> Option<i64> {
        self.local.allreduce
    }
}

pub trait WorkerProgram<M>: Send {
    fn step(&mut self, ctx: &mut WorkerCtx<'_, M>) -> Result<Yield>;
}

pub struct Runtime<M = ()> {
    size: usize,
    schedule: Schedule,
    checking: bool,
    step_budget: usize,
    windows: Vec<Option<Window>>,
    locals: Vec<WorkerLocal<M>>,
}

impl<M: Send> Runtime<M> {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            schedule: Schedule::Sequential,
            checking: false,
            step_budget: 1 << 20,
            windows: Vec::new(),
            locals: (0..size).map(|_| WorkerLocal::new()).collect(),
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_checking(mut self, checking: bool) -> Self {
        self.checking = checking;
        self
    }

    /// Maximum synchronisation rounds of one [`Runtime::execute`] call.
    pub fn with_step_budget(mut self, rounds: usize) -> Self {
        self.step_budget = rounds;
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn world(&self) -> WorkerGroup {
        WorkerGroup::world(self.size)
    }

    pub fn checking(&self) -> bool {
        self.checking
    }

    /// Collectively allocates a zeroed window; `lens[rank]` slots per member.
    pub fn create_window(&mut self, group: &WorkerGroup, name: &str, lens: &[usize]) -> WindowId {
        let w = Window::new(name, group, lens, self.checking);
        let id = self
            .windows
            .iter()
            .position(Option::is_none)
            .unwrap_or_else(|| {
                self.windows.push(None);
                self.windows.len() - 1
            });
        self.windows[id] = Some(w);
        WindowId(id)
    }

    pub fn free_window(&mut self, id: WindowId) {
        if let Some(w) = self.windows.get_mut(id.0) {
            *w = None;
        }
        for local in &mut self.locals {
            if let Some(o) = local.open.get_mut(id.0) {
                *o = false;
            }
        }
    }

    pub fn window_len(&self, id: WindowId, owner: usize) -> Option<usize> {
        self.windows.get(id.0)?.as_ref()?.len_at(owner)
    }

    /// The owner's current array, read outside any epoch.
    pub fn window_snapshot(&self, id: WindowId, owner: usize) -> Option<Vec<bool>> {
        self.windows.get(id.0)?.as_ref()?.snapshot(owner)
    }

    pub fn counters(&self, world: usize) -> Counters {
        self.locals[world].counters
    }

    pub fn busy_time(&self, world: usize) -> Duration {
        self.locals[world].busy
    }

    pub fn counter_board(&self) -> Vec<CounterRecord> {
        self.locals
            .iter()
            .enumerate()
            .map(|(worker, l)| CounterRecord {
                worker,
                puts: l.counters.puts,
                gets: l.counters.gets,
                barriers: l.counters.barriers,
                allreduces: l.counters.allreduces,
                msgs: l.counters.msgs,
            })
            .collect()
    }

    pub fn counter_board_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.counter_board())?)
    }

    /// Runs `programs[rank]` on every member of `group` until all are done.
    pub fn execute<P: WorkerProgram<M>>(
        &mut self,
        group: &WorkerGroup,
        programs: &mut [P],
    ) -> Result<()> {
        if programs.len() != group.size() {
            return Err(Error::InvalidInput(format!(
                "{} programs for a group of {}",
                programs.len(),
                group.size()
            )));
        }
        if let Some(&w) = group.members().iter().find(|&&w| w >= self.size) {
            return Err(Error::InvalidInput(format!("worker {w} not in runtime")));
        }

        let mut members: Vec<(usize, &mut P, &mut WorkerLocal<M>)> = {
            let mut locals: Vec<Option<&mut WorkerLocal<M>>> =
                self.locals.iter_mut().map(Some).collect();
            group
                .members()
                .iter()
                .zip(programs.iter_mut())
                .map(|(&w, p)| (w, p, locals[w].take().expect("unique members")))
                .collect()
        };
        let windows = &self.windows[..];
        let n = members.len();
        let mut finished = vec![false; n];

        for round in 0..self.step_budget {
            let yields = step_round(
                &mut members,
                &finished,
                group,
                windows,
                self.schedule,
                round,
            )?;

            for (rank, y) in yields.iter().enumerate() {
                if *y == Some(Yield::Done) {
                    finished[rank] = true;
                }
            }
            if finished.iter().all(|&f| f) {
                return Ok(());
            }
            let waiting: Vec<_> = (0..n).filter(|&r| !finished[r]).collect();
            if waiting.len() != n {
                return Err(RuntimeError::Deadlock {
                    waiting: waiting.iter().map(|&r| group.world_id(r)).collect(),
                    finished: (0..n)
                        .filter(|&r| finished[r])
                        .map(|r| group.world_id(r))
                        .collect(),
                }
                .into());
            }

            let kinds: Vec<Yield> = yields.into_iter().map(|y| y.expect("stepped")).collect();
            if kinds.iter().any(|k| k.kind() != kinds[0].kind()) {
                let desc = kinds
                    .iter()
                    .enumerate()
                    .map(|(r, k)| format!("{}:{}", group.world_id(r), k.kind()))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(RuntimeError::CollectiveMismatch(desc).into());
            }

            for w in windows.iter().flatten() {
                w.end_epoch()?;
            }

            match kinds[0] {
                Yield::Barrier => {
                    for (_, _, local) in members.iter_mut() {
                        local.counters.barriers += 1;
                    }
                }
                Yield::Allreduce(_) => {
                    let total = kinds
                        .iter()
                        .map(|k| match k {
                            Yield::Allreduce(v) => *v,
                            _ => unreachable!(),
                        })
                        .sum();
                    for (_, _, local) in members.iter_mut() {
                        local.counters.allreduces += 1;
                        local.allreduce = Some(total);
                    }
                }
                Yield::Exchange => deliver(&mut members, group)?,
                Yield::Done => unreachable!(),
            }
        }
        Err(RuntimeError::StepBudget(self.step_budget).into())
    }
}

type Member<'a, P, M> = (usize, &'a mut P, &'a mut WorkerLocal<M>);

fn step_one<P: WorkerProgram<M>, M>(
    member: &mut Member<'_, P, M>,
    group: &WorkerGroup,
    windows: &[Option<Window>],
) -> Result<Yield> {
    let (world, program, local) = member;
    let start = Instant::now();
    let mut ctx = WorkerCtx {
        world: *world,
        group,
        windows,
        local,
    };
    let y = program.step(&mut ctx);
    ctx.local.busy += start.elapsed();
    y
}

fn step_round<P: WorkerProgram<M>, M: Send>(
    members: &mut [Member<'_, P, M>],
    finished: &[bool],
    group: &WorkerGroup,
    windows: &[Option<Window>],
    schedule: Schedule,
    round: usize,
) -> Result<Vec<Option<Yield>>> {
    let n = members.len();
    let results: Vec<Option<Result<Yield>>> = match schedule {
        #[cfg(feature = "parallel")]
        Schedule::Parallel => {
            use rayon::prelude::*;
            members
                .par_iter_mut()
                .zip(finished.par_iter())
                .map(|(m, &done)| (!done).then(|| step_one(m, group, windows)))
                .collect()
        }
        _ => {
            let order: Vec<usize> = match schedule {
                Schedule::Reverse => (0..n).rev().collect(),
                Schedule::Shuffled(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(round as u64);
                    let mut o: Vec<usize> = (0..n).collect();
                    o.shuffle(&mut rng);
                    o
                }
                _ => (0..n).collect(),
            };
            let mut out: Vec<Option<Result<Yield>>> = (0..n).map(|_| None).collect();
            for r in order {
                if !finished[r] {
                    out[r] = Some(step_one(&mut members[r], group, windows));
                }
            }
            out
        }
    };
    // lowest failing rank wins so errors do not depend on the schedule
    results.into_iter().map(|r| r.transpose()).collect()
}

fn deliver<P, M>(members: &mut [Member<'_, P, M>], group: &WorkerGroup) -> Result<()> {
    let mut routed: Vec<Vec<(usize, M)>> = (0..members.len()).map(|_| Vec::new()).collect();
    for (src, _, local) in members.iter_mut() {
        for (dest, msg) in local.outbox.drain(..) {
            let rank = group.rank_of(dest).ok_or(RuntimeError::Undeliverable {
                src: *src,
                dest,
            })?;
            routed[rank].push((*src, msg));
        }
    }
    for ((_, _, local), msgs) in members.iter_mut().zip(routed) {
        local.inbox = msgs;
    }
    Ok(())
}
