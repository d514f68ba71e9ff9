//! Per-domain-group event loop.
//!
//! Each iteration first takes newly submitted commands (posting the first
//! work request of every new transfer right away), then posts work that
//! earlier iterations could not, then polls every rail. The worker parks on
//! its doorbell when an iteration found nothing to do.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};

use super::Shared;
use crate::error::TransferError;
use crate::mem::DeviceBuffer;
use crate::trace::{PostPhase, TraceKind};
use crate::transport::{CompletionEvent, Domain, Doorbell, PostError, WorkRequest, WrOp};
use crate::types::{NetAddr, OnDone};
use crate::vclock::Nanos;

const POLL_BATCH: usize = 256;
const DRAIN_LIMIT: Duration = Duration::from_secs(5);

/// A received message lent to the handler. The buffer goes back to the
/// receive pool once the handler returns, so do not keep it.
pub struct RecvMsg {
    pub from: NetAddr,
    buf: Arc<DeviceBuffer>,
    len: usize,
}

impl RecvMsg {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn buffer(&self) -> &DeviceBuffer {
        &self.buf
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.buf.read_vec(0, self.len)
    }
}

pub type MsgHandler = Arc<dyn Fn(&RecvMsg) + Send + Sync>;

pub(crate) struct PlannedWr {
    pub rail: usize,
    pub wr: WorkRequest,
}

pub(crate) struct Transfer {
    pub id: u64,
    pub wrs: Vec<PlannedWr>,
    /// Immediate-only write posted once every entry of `wrs` completed.
    pub fence: Option<PlannedWr>,
    pub on_done: OnDone,
    pub vt: Nanos,
}

pub(crate) enum Command {
    Submit(Transfer),
    Register { buf: Arc<DeviceBuffer>, offset: usize, len: usize, base: u64, reply: Sender<Result<Vec<u64>, TransferError>> },
    Deregister(Vec<u64>),
    PostRecv(Arc<DeviceBuffer>, MsgHandler),
    Repost(Arc<DeviceBuffer>),
    Shutdown,
}

struct PendingTransfer {
    remaining: usize,
    error: Option<TransferError>,
    max_at: Nanos,
    fence: Option<PlannedWr>,
    on_done: OnDone,
}

pub(crate) struct Worker {
    pub group: usize,
    pub domains: Vec<Box<dyn Domain>>,
    pub rx: Receiver<Command>,
    pub self_tx: Sender<Command>,
    pub bell: Doorbell,
    pub shared: Arc<Shared>,
    pending: HashMap<u64, PendingTransfer>,
    backlog: Vec<VecDeque<(WorkRequest, PostPhase)>>,
    handlers: HashMap<u64, MsgHandler>,
    names: Vec<String>,
    drain_since: Option<Instant>,
}

impl Worker {
    pub fn new(
        group: usize,
        mut domains: Vec<Box<dyn Domain>>,
        rx: Receiver<Command>,
        self_tx: Sender<Command>,
        bell: Doorbell,
        shared: Arc<Shared>,
    ) -> Self {
        for d in domains.iter_mut() {
            d.set_doorbell(bell.clone());
        }
        let names = domains.iter().map(|d| d.addr().to_string()).collect();
        let rails = domains.len();
        Self {
            group,
            domains,
            rx,
            self_tx,
            bell,
            shared,
            pending: HashMap::new(),
            backlog: (0..rails).map(|_| VecDeque::new()).collect(),
            handlers: HashMap::new(),
            names,
            drain_since: None,
        }
    }

    pub fn run(mut self) {
        let mut events = Vec::with_capacity(POLL_BATCH);
        loop {
            let mut new = 0;
            while let Ok(cmd) = self.rx.try_recv() {
                new += self.command(cmd);
            }
            let pending = self.progress();
            events.clear();
            for d in self.domains.iter_mut() {
                d.poll(POLL_BATCH, &mut events);
            }
            let n_events = events.len();
            for ev in events.drain(..) {
                self.event(ev);
            }
            if new + pending > 0 {
                self.record(0, TraceKind::Loop { engine: self.shared.name.clone(), group: self.group, new, pending });
            }
            if let Some(since) = self.drain_since {
                let idle = self.pending.is_empty() && self.backlog.iter().all(|b| b.is_empty());
                if idle || since.elapsed() > DRAIN_LIMIT {
                    break;
                }
            }
            if new + pending + n_events > 0 || self.backlog.iter().any(|b| !b.is_empty()) {
                continue;
            }
            let timeout = if self.domains.iter().any(|d| d.has_staged()) { Duration::from_millis(1) } else { Duration::from_millis(100) };
            self.bell.wait(timeout);
        }
        for (_, p) in self.pending.drain() {
            self.shared.cbs.fire(p.on_done, Err(TransferError::Shutdown), p.max_at);
        }
        for d in self.domains.iter_mut() {
            d.close();
        }
    }

    fn record(&self, vt: Nanos, kind: TraceKind) {
        if let Some(t) = &self.shared.trace {
            t.record(vt, kind);
        }
    }

    /// Returns 1 if a work request was posted.
    fn command(&mut self, cmd: Command) -> usize {
        match cmd {
            Command::Submit(t) => return self.start(t),
            Command::Register { buf, offset, len, base, reply } => {
                let mut keys = Vec::with_capacity(self.domains.len());
                let mut err = None;
                for d in self.domains.iter_mut() {
                    match d.register(buf.clone(), offset, len, base) {
                        Ok(k) => keys.push(k),
                        Err(e) => {
                            err = Some(e);
                            break;
                        }
                    }
                }
                let res = match err {
                    None => Ok(keys),
                    Some(e) => {
                        for (d, k) in self.domains.iter_mut().zip(keys) {
                            d.deregister(k);
                        }
                        Err(e)
                    }
                };
                let _ = reply.send(res);
            }
            Command::Deregister(keys) => {
                for (d, k) in self.domains.iter_mut().zip(keys) {
                    d.deregister(k);
                }
            }
            Command::PostRecv(buf, handler) => {
                self.handlers.insert(buf.addr(), handler);
                self.post_recv(buf);
            }
            Command::Repost(buf) => self.post_recv(buf),
            Command::Shutdown => {
                self.drain_since.get_or_insert_with(Instant::now);
            }
        }
        0
    }

    fn post_recv(&mut self, buf: Arc<DeviceBuffer>) {
        let wr = WorkRequest { wr_id: 0, transfer_id: 0, op: WrOp::Recv { buf }, imm: None, issued_at: 0 };
        if let Err(e) = self.domains[0].post(wr) {
            log::warn!("{}: could not post receive buffer: {e:?}", self.names[0]);
        }
    }

    fn start(&mut self, t: Transfer) -> usize {
        if t.wrs.is_empty() {
            self.shared.cbs.fire(t.on_done, Ok(()), t.vt);
            return 0;
        }
        self.pending
            .insert(t.id, PendingTransfer { remaining: t.wrs.len(), error: None, max_at: t.vt, fence: t.fence, on_done: t.on_done });
        let mut wrs = t.wrs.into_iter();
        let first = wrs.next().unwrap();
        let posted = self.post(first.rail, first.wr, PostPhase::New, true);
        for p in wrs {
            self.backlog[p.rail].push_back((p.wr, PostPhase::Pending));
        }
        posted as usize
    }

    /// Posts one request. On backpressure the request is parked at the
    /// front (`urgent`) or back of its rail's backlog.
    fn post(&mut self, rail: usize, wr: WorkRequest, phase: PostPhase, urgent: bool) -> bool {
        let (tid, wr_id, len, imm, issued) = (wr.transfer_id, wr.wr_id, wr.len() as u64, wr.imm, wr.issued_at);
        let to = wr.peer().map(|p| p.to_string()).unwrap_or_default();
        match self.domains[rail].post(wr) {
            Ok(()) => {
                self.record(issued, TraceKind::Post { from: self.names[rail].clone(), to, transfer: tid, wr: wr_id, len, imm, phase });
                true
            }
            Err(PostError::Backpressure(wr)) => {
                // A first request that could not go out now waits like any other.
                let phase = if phase == PostPhase::New { PostPhase::Pending } else { phase };
                if urgent {
                    self.backlog[rail].push_front((*wr, phase));
                } else {
                    self.backlog[rail].push_back((*wr, phase));
                }
                false
            }
            Err(PostError::Invalid(e)) => {
                self.wr_done(tid, Err(TransferError::Invalid(e)), issued);
                false
            }
        }
    }

    fn progress(&mut self) -> usize {
        let mut posted = 0;
        for rail in 0..self.backlog.len() {
            while let Some((wr, phase)) = self.backlog[rail].pop_front() {
                let before = self.backlog[rail].len();
                if self.post(rail, wr, phase, true) {
                    posted += 1;
                } else if self.backlog[rail].len() > before {
                    break;
                }
            }
        }
        posted
    }

    fn wr_done(&mut self, tid: u64, result: Result<(), TransferError>, at: Nanos) {
        let Some(p) = self.pending.get_mut(&tid) else { return };
        p.remaining -= 1;
        p.max_at = p.max_at.max(at);
        if let Err(e) = result {
            p.error.get_or_insert(e);
        }
        if p.remaining > 0 {
            return;
        }
        if p.error.is_none() {
            if let Some(mut f) = p.fence.take() {
                f.wr.issued_at = p.max_at;
                p.remaining = 1;
                self.backlog[f.rail].push_back((f.wr, PostPhase::Fence));
                return;
            }
        }
        let p = self.pending.remove(&tid).unwrap();
        let result = match p.error {
            None => Ok(()),
            Some(e) => Err(e),
        };
        self.shared.cbs.fire(p.on_done, result, p.max_at);
    }

    fn event(&mut self, ev: CompletionEvent) {
        match ev {
            CompletionEvent::SendDone { transfer_id, result, at, .. } => self.wr_done(transfer_id, result, at),
            CompletionEvent::ImmReceived { imm, at, .. } => {
                if let Some((on_done, t)) = self.shared.imm.receipt(imm, at) {
                    self.shared.cbs.fire(on_done, Ok(()), t);
                }
            }
            CompletionEvent::MsgReceived { from, buf, len, at } => match self.handlers.get(&buf.addr()).cloned() {
                Some(h) => {
                    let (tx, bell) = (self.self_tx.clone(), self.bell.clone());
                    self.shared.cbs.run(
                        at,
                        Box::new(move || {
                            let msg = RecvMsg { from, buf, len };
                            h(&msg);
                            let _ = tx.send(Command::Repost(msg.buf));
                            bell.ring();
                        }),
                    );
                }
                None => self.post_recv(buf),
            },
        }
    }
}
