//! The rail abstraction.
//!
//! A [`Domain`] is one rail: it accepts work requests and reports
//! completions. Delivery is reliable and exactly-once but carries no ordering
//! promise between any two work requests. An immediate value is surfaced on
//! the receiver only after the whole payload of its write is in memory.
//!
//! Two implementations exist: [`sim::SimFabric`], an in-process fabric with
//! fault injection and a model-time link model, and [`socket::UdpTransport`],
//! which moves bytes over UDP with acknowledgements and retransmission.

pub mod sim;
pub mod socket;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::error::TransferError;
use crate::mem::DeviceBuffer;
use crate::types::NetAddr;
use crate::vclock::Nanos;

/// Local source bytes of a write.
#[derive(Clone)]
pub struct SrcSlice {
    pub buf: Arc<DeviceBuffer>,
    pub offset: usize,
    pub len: usize,
}

impl fmt::Debug for SrcSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SrcSlice({:#x}+{}, {})", self.buf.addr(), self.offset, self.len)
    }
}

/// Remote target of a write: absolute address inside the region named by
/// `rkey` on endpoint `peer`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteSlice {
    pub peer: NetAddr,
    pub addr: u64,
    pub rkey: u64,
}

#[derive(Debug, Clone)]
pub enum WrOp {
    /// One-sided write. A zero-length write still needs a valid target.
    Write { src: SrcSlice, dst: RemoteSlice },
    /// Two-sided message; consumes one posted receive buffer at the peer.
    Send { peer: NetAddr, payload: Arc<[u8]> },
    /// Posts a receive buffer for incoming messages.
    Recv { buf: Arc<DeviceBuffer> },
}

#[derive(Debug, Clone)]
pub struct WorkRequest {
    pub wr_id: u64,
    pub transfer_id: u64,
    pub op: WrOp,
    pub imm: Option<u32>,
    /// Model time at which the request became eligible to leave.
    pub issued_at: Nanos,
}

impl WorkRequest {
    pub fn len(&self) -> usize {
        match &self.op {
            WrOp::Write { src, .. } => src.len,
            WrOp::Send { payload, .. } => payload.len(),
            WrOp::Recv { buf } => buf.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn peer(&self) -> Option<&NetAddr> {
        match &self.op {
            WrOp::Write { dst, .. } => Some(&dst.peer),
            WrOp::Send { peer, .. } => Some(peer),
            WrOp::Recv { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum CompletionEvent {
    /// Sender side: the write or message identified by `wr_id` finished.
    SendDone { wr_id: u64, transfer_id: u64, result: Result<(), TransferError>, at: Nanos },
    /// Receiver side: a write carrying `imm` fully landed.
    ImmReceived { imm: u32, from: NetAddr, at: Nanos },
    /// Receiver side: a message filled the first `len` bytes of `buf`.
    MsgReceived { from: NetAddr, buf: Arc<DeviceBuffer>, len: usize, at: Nanos },
}

/// A registration as seen by the receiving side of a transport.
#[derive(Clone)]
pub(crate) struct Region {
    pub buf: Arc<DeviceBuffer>,
    pub offset: usize,
    pub base: u64,
    pub len: u64,
}

impl Region {
    /// Buffer offset for `[addr, addr+len)`, if it lies inside the region.
    pub fn resolve(&self, addr: u64, len: usize) -> Option<usize> {
        let rel = addr.checked_sub(self.base)?;
        let end = rel.checked_add(len as u64)?;
        (end <= self.len).then(|| self.offset + rel as usize)
    }
}

#[derive(Debug)]
pub enum PostError {
    /// Send queue full; retry after the next poll.
    Backpressure(Box<WorkRequest>),
    Invalid(String),
}

/// Wakes a parked worker. Rung by submitters and by transports when a
/// completion becomes available.
#[derive(Default)]
pub struct Bell {
    rung: Mutex<bool>,
    cv: Condvar,
}

pub type Doorbell = Arc<Bell>;

impl Bell {
    pub fn new() -> Doorbell {
        Arc::new(Self::default())
    }

    pub fn ring(&self) {
        let mut r = self.rung.lock().unwrap();
        if !*r {
            *r = true;
            self.cv.notify_one();
        }
    }

    /// Waits for a ring (consuming it) or the timeout. Returns whether it rang.
    pub fn wait(&self, timeout: Duration) -> bool {
        let mut r = self.rung.lock().unwrap();
        if !*r {
            r = self.cv.wait_timeout(r, timeout).unwrap().0;
        }
        std::mem::replace(&mut *r, false)
    }
}

impl fmt::Debug for Bell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Bell")
    }
}

/// One rail. Owned and driven by a single worker thread.
pub trait Domain: Send {
    fn addr(&self) -> &NetAddr;

    fn max_wr_size(&self) -> usize;

    /// Makes `buf[offset..offset+len]` writable by peers at addresses
    /// `[base, base+len)`. Returns the rkey peers must present.
    fn register(&mut self, buf: Arc<DeviceBuffer>, offset: usize, len: usize, base: u64) -> Result<u64, TransferError>;

    fn deregister(&mut self, rkey: u64);

    fn post(&mut self, wr: WorkRequest) -> Result<(), PostError>;

    /// Appends up to `max` events to `out`; returns how many were added.
    fn poll(&mut self, max: usize, out: &mut Vec<CompletionEvent>) -> usize;

    /// Whether posted work is still waiting to be moved by `poll`.
    fn has_staged(&self) -> bool {
        false
    }

    fn set_doorbell(&mut self, bell: Doorbell);

    fn close(&mut self);
}

/// Factory for rails. One call per domain group.
pub trait Transport: Send + Sync {
    fn open_group(&self, rails: usize) -> Result<Vec<Box<dyn Domain>>, TransferError>;

    /// Whether completion times are model time (true) or wall time.
    fn virtual_time(&self) -> bool;
}
