//! Boolean windows under the unified memory model: one authoritative array per
//! owner, read and written in place by every origin.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU8, Ordering};

use super::{RaceKind, RuntimeError, WorkerGroup};

const NOBODY: u32 = 0;
const MANY: u32 = u32::MAX;

/// Per-slot access record for one epoch.
#[derive(Default)]
struct SlotLog {
    writers: AtomicU32,
    readers: AtomicU32,
    /// bit 0: `false` written, bit 1: `true` written
    values: AtomicU8,
}

impl SlotLog {
    fn note(cell: &AtomicU32, origin: usize) {
        let me = origin as u32 + 1;
        let mut cur = cell.load(Ordering::Relaxed);
        loop {
            let next = match cur {
                NOBODY => me,
                c if c == me || c == MANY => return,
                _ => MANY,
            };
            match cell.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return,
                Err(c) => cur = c,
            }
        }
    }

    fn record_write(&self, origin: usize, value: bool) {
        Self::note(&self.writers, origin);
        self.values.fetch_or(1 << value as u8, Ordering::Relaxed);
    }

    fn record_read(&self, origin: usize) {
        Self::note(&self.readers, origin);
    }

    /// Returns the conflict seen this epoch, clearing the record.
    fn take_conflict(&self) -> Option<RaceKind> {
        let values = self.values.swap(0, Ordering::Relaxed);
        let writers = self.writers.swap(NOBODY, Ordering::Relaxed);
        let readers = self.readers.swap(NOBODY, Ordering::Relaxed);
        if values == 0b11 {
            return Some(RaceKind::ConflictingWrites);
        }
        if writers != NOBODY && readers != NOBODY && !(writers == readers && writers != MANY) {
            return Some(RaceKind::ReadAfterForeignWrite);
        }
        None
    }
}

pub(crate) struct Window {
    pub(crate) name: String,
    group: WorkerGroup,
    slots: Vec<Box<[AtomicBool]>>,
    log: Option<Vec<Box<[SlotLog]>>>,
}

impl Window {
    pub(crate) fn new(name: &str, group: &WorkerGroup, lens: &[usize], checking: bool) -> Self {
        assert_eq!(lens.len(), group.size());
        let slots = lens
            .iter()
            .map(|&n| (0..n).map(|_| AtomicBool::new(false)).collect())
            .collect();
        let log = checking.then(|| {
            lens.iter()
                .map(|&n| (0..n).map(|_| SlotLog::default()).collect())
                .collect()
        });
        Self {
            name: name.to_owned(),
            group: group.clone(),
            slots,
            log,
        }
    }

    pub(crate) fn len_at(&self, owner: usize) -> Option<usize> {
        self.group.rank_of(owner).map(|r| self.slots[r].len())
    }

    fn slot(&self, target: usize, index: usize) -> Result<(usize, &AtomicBool), RuntimeError> {
        let rank = self
            .group
            .rank_of(target)
            .ok_or_else(|| RuntimeError::InvalidTarget {
                window: self.name.clone(),
                target,
            })?;
        let slots = &self.slots[rank];
        slots
            .get(index)
            .map(|s| (rank, s))
            .ok_or_else(|| RuntimeError::OutOfBounds {
                window: self.name.clone(),
                target,
                index,
                len: slots.len(),
            })
    }

    pub(crate) fn write(
        &self,
        origin: usize,
        target: usize,
        index: usize,
        value: bool,
    ) -> Result<(), RuntimeError> {
        let (rank, slot) = self.slot(target, index)?;
        slot.store(value, Ordering::Relaxed);
        if let Some(log) = &self.log {
            log[rank][index].record_write(origin, value);
        }
        Ok(())
    }

    pub(crate) fn read(
        &self,
        origin: usize,
        target: usize,
        index: usize,
    ) -> Result<bool, RuntimeError> {
        let (rank, slot) = self.slot(target, index)?;
        if let Some(log) = &self.log {
            log[rank][index].record_read(origin);
        }
        Ok(slot.load(Ordering::Relaxed))
    }

    /// Closes the checking epoch: reports the first conflicting slot.
    pub(crate) fn end_epoch(&self) -> Result<(), RuntimeError> {
        let Some(log) = &self.log else {
            return Ok(());
        };
        let mut first = None;
        for (rank, slots) in log.iter().enumerate() {
            for (index, s) in slots.iter().enumerate() {
                if let Some(kind) = s.take_conflict() {
                    first.get_or_insert(RuntimeError::Race {
                        window: self.name.clone(),
                        owner: self.group.world_id(rank),
                        index,
                        kind,
                    });
                }
            }
        }
        first.map_or(Ok(()), Err)
    }

    /// Owner-side snapshot of the authoritative array.
    pub(crate) fn snapshot(&self, owner: usize) -> Option<Vec<bool>> {
        let rank = self.group.rank_of(owner)?;
        Some(
            self.slots[rank]
                .iter()
                .map(|s| s.load(Ordering::Relaxed))
                .collect(),
        )
    }
}
