//! Per-immediate receipt counters.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use crate::error::TransferError;
use crate::types::OnDone;
use crate::vclock::Nanos;

struct Armed {
    count: u64,
    on_done: OnDone,
}

#[derive(Default)]
struct Entry {
    /// Receipts ever seen for this value.
    total: u64,
    /// Arrival times of receipts not yet consumed by an expectation.
    unconsumed: VecDeque<Nanos>,
    armed: Option<Armed>,
}

/// An expectation that reached its threshold, with the time of the receipt
/// that completed it.
pub(crate) type Fired = (OnDone, Nanos);

/// Counts receipts per immediate value. An expectation consumes exactly
/// `count` receipts when it fires; receipts left over (or arriving before an
/// expectation is armed) stay available for the next one.
#[derive(Default)]
pub(crate) struct ImmCounterTable {
    entries: Mutex<HashMap<u32, Entry>>,
}

impl ImmCounterTable {
    pub fn arm(&self, imm: u32, count: u32, on_done: OnDone, now: Nanos) -> Result<Option<Fired>, (TransferError, OnDone)> {
        let mut entries = self.entries.lock().unwrap();
        let e = entries.entry(imm).or_default();
        if e.armed.is_some() {
            return Err((TransferError::AlreadyArmed(imm), on_done));
        }
        e.armed = Some(Armed { count: count as u64, on_done });
        Ok(Self::try_fire(e, now))
    }

    pub fn receipt(&self, imm: u32, at: Nanos) -> Option<Fired> {
        let mut entries = self.entries.lock().unwrap();
        let e = entries.entry(imm).or_default();
        e.total += 1;
        e.unconsumed.push_back(at);
        Self::try_fire(e, at)
    }

    fn try_fire(e: &mut Entry, now: Nanos) -> Option<Fired> {
        let need = e.armed.as_ref()?.count;
        if (e.unconsumed.len() as u64) < need {
            return None;
        }
        // Never earlier than the arming or the completing receipt.
        let at = e.unconsumed.drain(..need as usize).fold(now, Nanos::max);
        Some((e.armed.take().unwrap().on_done, at))
    }

    /// Drops an armed expectation without firing it.
    #[cfg(test)]
    pub fn disarm(&self, imm: u32) -> Option<OnDone> {
        let mut entries = self.entries.lock().unwrap();
        entries.get_mut(&imm)?.armed.take().map(|a| a.on_done)
    }

    /// Forgets unconsumed receipts and any expectation for `imm`.
    pub fn retire(&self, imm: u32) -> Option<OnDone> {
        let mut entries = self.entries.lock().unwrap();
        let e = entries.get_mut(&imm)?;
        e.unconsumed.clear();
        e.armed.take().map(|a| a.on_done)
    }

    pub fn total(&self, imm: u32) -> u64 {
        self.entries.lock().unwrap().get(&imm).map_or(0, |e| e.total)
    }

    #[cfg(test)]
    pub fn unconsumed(&self, imm: u32) -> usize {
        self.entries.lock().unwrap().get(&imm).map_or(0, |e| e.unconsumed.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn counter_cb(c: &Arc<AtomicUsize>) -> OnDone {
        let c = c.clone();
        OnDone::callback(move |_| {
            c.fetch_add(1, Ordering::SeqCst);
        })
    }

    fn run(f: Option<Fired>) {
        if let Some((OnDone::Callback(cb), _)) = f {
            cb(Ok(()))
        }
    }

    #[test]
    fn fires_once_at_threshold() {
        let t = ImmCounterTable::default();
        let c = Arc::new(AtomicUsize::new(0));
        run(t.arm(7, 3, counter_cb(&c), 0).unwrap());
        run(t.receipt(7, 10));
        run(t.receipt(7, 30));
        assert_eq!(c.load(Ordering::SeqCst), 0);
        let fired = t.receipt(7, 20);
        assert_eq!(fired.as_ref().map(|f| f.1), Some(30));
        run(fired);
        run(t.receipt(7, 40));
        assert_eq!(c.load(Ordering::SeqCst), 1);
        assert_eq!(t.total(7), 4);
        assert_eq!(t.unconsumed(7), 1);
    }

    #[test]
    fn receipts_before_arming_fire_immediately() {
        let t = ImmCounterTable::default();
        t.receipt(1, 5);
        t.receipt(1, 6);
        let c = Arc::new(AtomicUsize::new(0));
        let fired = t.arm(1, 2, counter_cb(&c), 100).unwrap();
        assert_eq!(fired.as_ref().map(|f| f.1), Some(100));
        run(fired);
        assert_eq!(c.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn double_arm_rejected_and_rearm_after_fire() {
        let t = ImmCounterTable::default();
        assert!(t.arm(3, 1, OnDone::Ignore, 0).unwrap().is_none());
        assert!(matches!(t.arm(3, 1, OnDone::Ignore, 0), Err((TransferError::AlreadyArmed(3), _))));
        assert!(t.receipt(3, 1).is_some());
        assert!(t.arm(3, 1, OnDone::Ignore, 0).unwrap().is_none());
    }

    #[test]
    fn zero_count_fires_at_arm_time() {
        let t = ImmCounterTable::default();
        let f = t.arm(9, 0, OnDone::Ignore, 77).unwrap();
        assert_eq!(f.map(|f| f.1), Some(77));
    }

    #[test]
    fn short_count_never_fires() {
        let t = ImmCounterTable::default();
        t.arm(7, 3, OnDone::Ignore, 0).unwrap();
        assert!(t.receipt(7, 1).is_none());
        assert!(t.receipt(7, 2).is_none());
        assert!(t.disarm(7).is_some());
    }
}
