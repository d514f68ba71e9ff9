//! Intra-node lane: ranks on one node copy straight into each other's
//! memory and bump arrival counters, standing in for NVLink stores and
//! flags.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use crate::mem::DeviceBuffer;
use crate::vclock::{self, Nanos};

/// Monotone arrival counter that carries the model time of the latest bump.
#[derive(Default)]
pub struct ShmCounter {
    state: Mutex<(u64, Nanos)>,
    cv: Condvar,
}

impl ShmCounter {
    pub fn bump(&self) {
        let mut s = self.state.lock().unwrap();
        s.0 += 1;
        s.1 = s.1.max(vclock::now());
        self.cv.notify_all();
    }

    pub fn get(&self) -> u64 {
        self.state.lock().unwrap().0
    }

    /// Waits until the counter reaches `target`; folds the bump time into
    /// the caller's clock.
    pub fn wait(&self, target: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock().unwrap();
        while s.0 < target {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            s = self.cv.wait_timeout(s, left).unwrap().0;
        }
        vclock::observe(s.1);
        true
    }
}

/// Per-rank memory and counters visible to the other ranks of its node.
pub struct ShmPeer {
    pub recv: Arc<DeviceBuffer>,
    /// Slots intra-node sources fill with their route row and tokens.
    pub slots: Arc<DeviceBuffer>,
    pub dispatch: ShmCounter,
    pub combine: ShmCounter,
    pub barrier: ShmCounter,
}

#[derive(Default)]
pub struct ShmNode {
    peers: RwLock<HashMap<usize, Arc<ShmPeer>>>,
}

impl ShmNode {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub(crate) fn attach(&self, rank: usize, recv: Arc<DeviceBuffer>, slots: Arc<DeviceBuffer>) -> Arc<ShmPeer> {
        let p = Arc::new(ShmPeer {
            recv,
            slots,
            dispatch: ShmCounter::default(),
            combine: ShmCounter::default(),
            barrier: ShmCounter::default(),
        });
        self.peers.write().unwrap().insert(rank, p.clone());
        p
    }

    pub fn peer(&self, rank: usize) -> Option<Arc<ShmPeer>> {
        self.peers.read().unwrap().get(&rank).cloned()
    }
}
