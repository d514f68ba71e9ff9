use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::msg::{ContextTarget, KvMsg, PrefillRequest};
use super::shard::HeadSlice;
use super::{KvConfig, MSG_BYTES, RECV_SLOTS};
use crate::engine::TransferEngine;
use crate::error::{Result, TransferError};
use crate::mem::DeviceBuffer;
use crate::types::{Device, MrDesc, NetAddr, OnDone, Pages};
use crate::vclock::{self, Nanos};
use crate::wire::Wire;

const IMM_RING: u32 = 1 << 16;

/// One prefiller serving (part of) a request.
#[derive(Debug, Clone)]
pub struct PrefillTarget {
    pub addr: NetAddr,
    pub slice: HeadSlice,
    /// Whether this prefiller also sends the context.
    pub context: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvOutcome {
    /// Every expected transfer arrived; decoding may start.
    Ready {
        at: Nanos,
    },
    /// Cancellation confirmed by every prefiller; pages were released.
    Cancelled,
    /// A prefiller went silent; pages were released.
    TimedOut,
    Failed(String),
}

struct Slot {
    outcome: Mutex<Option<KvOutcome>>,
    cv: Condvar,
}

/// Decoder-side handle of an in-flight request.
#[derive(Clone)]
pub struct KvRequest {
    pub id: u64,
    pub imm: u32,
    /// Pool pages holding this request, in token order.
    pub pages: Vec<u32>,
    pub context_slot: Option<u32>,
    slot: Arc<Slot>,
}

impl KvRequest {
    pub fn outcome(&self) -> Option<KvOutcome> {
        self.slot.outcome.lock().unwrap().clone()
    }

    pub fn wait(&self, timeout: Duration) -> Option<KvOutcome> {
        let g = self.slot.outcome.lock().unwrap();
        let (g, _) = self.slot.cv.wait_timeout_while(g, timeout, |o| o.is_none()).unwrap();
        g.clone()
    }
}

enum Event {
    Dispatch { tokens: u32, pages: u32, chunks: u32, targets: Vec<PrefillTarget>, reply: Sender<Result<KvRequest>> },
    Msg(NetAddr, KvMsg),
    Complete { id: u64, ok: bool, at: Nanos },
    SendFailed(u64),
    Cancel(u64),
    Release(u64),
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Active,
    CancelRequested,
    Decoding,
}

struct Req {
    handle: KvRequest,
    targets: Vec<NetAddr>,
    unconfirmed: HashSet<NetAddr>,
    state: State,
}

/// Receiving side: owns the KV page pool and starts decoding once all
/// transfers of a request landed.
pub struct Decoder {
    engine: TransferEngine,
    cfg: KvConfig,
    kv: Arc<DeviceBuffer>,
    ctx: Arc<DeviceBuffer>,
    tx: Sender<Event>,
    thread: Option<JoinHandle<()>>,
}

impl Decoder {
    pub fn new(engine: TransferEngine, cfg: KvConfig) -> Result<Self> {
        let kv = DeviceBuffer::new(cfg.kv_bytes() as usize);
        let (_, kv_desc) = engine.reg_mr(&kv, Device::Gpu(0))?;
        let ctx_len = cfg.max_requests as u64 * cfg.context_bytes;
        let ctx = DeviceBuffer::new(ctx_len as usize);
        let ctx_desc = if ctx_len > 0 { Some(engine.reg_mr(&ctx, Device::Gpu(0))?.1) } else { None };
        let (tx, rx) = unbounded();
        let handler_tx = tx.clone();
        engine.submit_recvs(MSG_BYTES, RECV_SLOTS, move |m| match KvMsg::decode(&m.bytes()) {
            Ok(msg) => {
                let _ = handler_tx.send(Event::Msg(m.from.clone(), msg));
            }
            Err(e) => log::warn!("dropping malformed kv message from {}: {e}", m.from),
        })?;
        let proto = Protocol {
            engine: engine.clone(),
            cfg: cfg.clone(),
            kv_desc,
            ctx_desc,
            tx: tx.clone(),
            free_pages: (0..cfg.pages).collect(),
            free_slots: (0..cfg.max_requests).rev().collect(),
            imms: ImmRing::new(cfg.imm_base),
            reqs: HashMap::new(),
            last_seen: HashMap::new(),
            next_id: engine.id() << 32,
            seq: 0,
        };
        let thread = std::thread::Builder::new()
            .name(format!("{}-kvproto", engine.name()))
            .spawn(move || proto.run(rx))
            .expect("spawn protocol thread");
        Ok(Self { engine, cfg, kv, ctx, tx, thread: Some(thread) })
    }

    pub fn engine(&self) -> &TransferEngine {
        &self.engine
    }

    pub fn config(&self) -> &KvConfig {
        &self.cfg
    }

    /// Allocates pages for `tokens` tokens split over `pages` pages, arms the
    /// completion expectation and sends the request to every target.
    pub fn dispatch(&self, tokens: u32, pages: u32, chunks: u32, targets: Vec<PrefillTarget>) -> Result<KvRequest> {
        let (reply, rx) = crossbeam_channel::bounded(1);
        self.tx.send(Event::Dispatch { tokens, pages, chunks, targets, reply }).map_err(|_| TransferError::Shutdown)?;
        rx.recv().map_err(|_| TransferError::Shutdown)?
    }

    /// Asks the prefillers to stop. The request resolves to
    /// [`KvOutcome::Cancelled`] once all of them confirmed.
    pub fn cancel(&self, req: &KvRequest) {
        let _ = self.tx.send(Event::Cancel(req.id));
    }

    /// Returns the pages of a decoded request to the pool.
    pub fn release(&self, req: &KvRequest) {
        let _ = self.tx.send(Event::Release(req.id));
    }

    /// Bytes of `page` in `layer`.
    pub fn page(&self, layer: u32, page: u32) -> Vec<u8> {
        let at = layer as u64 * self.cfg.layer_stride() + page as u64 * self.cfg.page_bytes;
        self.kv.read_vec(at as usize, self.cfg.page_bytes as usize)
    }

    pub fn context(&self, slot: u32, len: u64) -> Vec<u8> {
        self.ctx.read_vec((slot as u64 * self.cfg.context_bytes) as usize, len as usize)
    }

    /// Byte ranges `[start, end)` of the engine-visible region a request's
    /// pages occupy, over all layers.
    pub fn page_ranges(&self, req: &KvRequest) -> Vec<(u64, u64)> {
        let base = self.kv.addr();
        let mut out = Vec::new();
        for layer in 0..self.cfg.layers {
            for &p in &req.pages {
                let at = base + layer as u64 * self.cfg.layer_stride() + p as u64 * self.cfg.page_bytes;
                out.push((at, at + self.cfg.page_bytes));
            }
        }
        out
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let _ = self.tx.send(Event::Stop);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Decoder {
    fn drop(&mut self) {
        self.stop();
    }
}

struct ImmRing {
    base: u32,
    next: u32,
    used: HashSet<u32>,
}

impl ImmRing {
    fn new(base: u32) -> Self {
        Self { base, next: 0, used: HashSet::new() }
    }

    fn alloc(&mut self) -> Option<u32> {
        for _ in 0..IMM_RING {
            let v = self.base.wrapping_add(self.next);
            self.next = (self.next + 1) % IMM_RING;
            if self.used.insert(v) {
                return Some(v);
            }
        }
        None
    }

    fn free(&mut self, v: u32) {
        self.used.remove(&v);
    }
}

struct Protocol {
    engine: TransferEngine,
    cfg: KvConfig,
    kv_desc: MrDesc,
    ctx_desc: Option<MrDesc>,
    tx: Sender<Event>,
    free_pages: VecDeque<u32>,
    free_slots: Vec<u32>,
    imms: ImmRing,
    reqs: HashMap<u64, Req>,
    last_seen: HashMap<NetAddr, Instant>,
    next_id: u64,
    seq: u64,
}

impl Protocol {
    fn run(mut self, rx: Receiver<Event>) {
        let mut next_beat = Instant::now() + self.cfg.heartbeat;
        loop {
            let ev = match rx.recv_deadline(next_beat) {
                Ok(Event::Stop) | Err(RecvTimeoutError::Disconnected) => break,
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => {
                    self.heartbeat();
                    next_beat = Instant::now() + self.cfg.heartbeat;
                    continue;
                }
            };
            match ev {
                Event::Dispatch { tokens, pages, chunks, targets, reply } => {
                    let _ = reply.send(self.dispatch(tokens, pages, chunks, targets));
                }
                Event::Msg(from, msg) => self.message(from, msg),
                Event::Complete { id, ok, at } => self.complete(id, ok, at),
                Event::SendFailed(id) => {
                    if self.reqs.get(&id).is_some_and(|r| r.state != State::Decoding) {
                        // A request that never left cannot be written to, but
                        // the other targets may have it; cancel them.
                        self.cancel(id);
                    }
                }
                Event::Cancel(id) => self.cancel(id),
                Event::Release(id) => {
                    if self.reqs.get(&id).is_some_and(|r| r.state == State::Decoding) {
                        self.finish(id, None);
                    }
                }
                Event::Stop => unreachable!(),
            }
        }
        for id in self.reqs.keys().copied().collect::<Vec<_>>() {
            self.finish(id, Some(KvOutcome::Failed("decoder shut down".into())));
        }
    }

    fn send(&self, to: &NetAddr, msg: &KvMsg, on_done: OnDone) {
        if let Err(e) = self.engine.submit_send(to, &msg.encode(), on_done) {
            log::warn!("send to {to} failed: {e}");
        }
    }

    fn dispatch(&mut self, tokens: u32, pages: u32, chunks: u32, targets: Vec<PrefillTarget>) -> Result<KvRequest> {
        if targets.is_empty() {
            return Err(TransferError::Invalid("no prefiller available".into()));
        }
        if chunks == 0 {
            return Err(TransferError::Invalid("zero chunks".into()));
        }
        let senders = targets.iter().filter(|t| t.context).count();
        if senders > 1 {
            return Err(TransferError::Invalid("context requested from several prefillers".into()));
        }
        if senders == 1 && self.ctx_desc.is_none() {
            return Err(TransferError::UnknownRegion);
        }
        for t in &targets {
            if t.slice.len == 0 || t.slice.offset + t.slice.len > self.cfg.page_bytes {
                return Err(TransferError::Invalid(format!("head slice {:?} outside the page", t.slice)));
            }
        }
        if self.free_pages.len() < pages as usize || (senders == 1 && self.free_slots.is_empty()) {
            return Err(TransferError::Invalid("decoder out of KV pages".into()));
        }
        let imm = self.imms.alloc().ok_or_else(|| TransferError::Invalid("immediate ring exhausted".into()))?;
        let page_list: Vec<u32> = self.free_pages.drain(..pages as usize).collect();
        let context_slot = if senders == 1 { self.free_slots.pop() } else { None };
        let id = self.next_id;
        self.next_id += 1;
        let per_target = self.cfg.layers * chunks;
        let expected = per_target * targets.len() as u32 + senders as u32;
        let handle = KvRequest {
            id,
            imm,
            pages: page_list.clone(),
            context_slot,
            slot: Arc::new(Slot { outcome: Mutex::new(None), cv: Condvar::new() }),
        };
        let tx = self.tx.clone();
        let armed = self.engine.expect_imm_count(
            imm,
            expected,
            OnDone::callback(move |r| {
                let _ = tx.send(Event::Complete { id, ok: r.is_ok(), at: vclock::now() });
            }),
        );
        if let Err(e) = armed {
            self.free_pages.extend(page_list);
            if let Some(s) = context_slot {
                self.free_slots.push(s);
            }
            self.imms.free(imm);
            return Err(e);
        }
        let now = Instant::now();
        for t in &targets {
            self.last_seen.entry(t.addr.clone()).or_insert(now);
            let context = if t.context {
                Some(ContextTarget {
                    desc: self.ctx_desc.clone().unwrap(),
                    offset: context_slot.unwrap() as u64 * self.cfg.context_bytes,
                    len: self.cfg.context_bytes,
                })
            } else {
                None
            };
            let req = PrefillRequest {
                id,
                tokens,
                chunks,
                imm,
                expected,
                page_len: t.slice.len,
                layer_stride: self.cfg.layer_stride(),
                pages: Pages { indices: page_list.clone(), stride: self.cfg.page_bytes, offset: t.slice.offset },
                kv: self.kv_desc.clone(),
                context,
                reply: self.engine.main_address(),
            };
            let tx = self.tx.clone();
            let failed = OnDone::callback(move |r| {
                if r.is_err() {
                    let _ = tx.send(Event::SendFailed(id));
                }
            });
            self.send(&t.addr, &KvMsg::Request(req), failed);
        }
        let targets: Vec<NetAddr> = targets.into_iter().map(|t| t.addr).collect();
        self.reqs.insert(id, Req { handle: handle.clone(), unconfirmed: targets.iter().cloned().collect(), targets, state: State::Active });
        Ok(handle)
    }

    fn complete(&mut self, id: u64, ok: bool, at: Nanos) {
        let Some(r) = self.reqs.get_mut(&id) else { return };
        if !ok || r.state != State::Active {
            return;
        }
        r.state = State::Decoding;
        if let Some(t) = self.engine.trace() {
            t.record(at, crate::trace::TraceKind::Mark { node: self.engine.name().to_string(), label: "decode_start".into(), value: id });
        }
        let mut g = r.handle.slot.outcome.lock().unwrap();
        *g = Some(KvOutcome::Ready { at });
        r.handle.slot.cv.notify_all();
    }

    fn cancel(&mut self, id: u64) {
        let Some(r) = self.reqs.get_mut(&id) else { return };
        if r.state != State::Active {
            return;
        }
        r.state = State::CancelRequested;
        let targets = r.targets.clone();
        for t in &targets {
            self.send(t, &KvMsg::Cancel { id }, OnDone::Ignore);
        }
    }

    fn message(&mut self, from: NetAddr, msg: KvMsg) {
        self.last_seen.insert(from.clone(), Instant::now());
        match msg {
            KvMsg::CancelConfirm { id } => {
                let Some(r) = self.reqs.get_mut(&id) else { return };
                r.unconfirmed.remove(&from);
                if r.unconfirmed.is_empty() && r.state == State::CancelRequested {
                    if let Some(t) = self.engine.trace() {
                        t.record(
                            vclock::now(),
                            crate::trace::TraceKind::Mark {
                                node: self.engine.name().to_string(),
                                label: "cancel_confirmed".into(),
                                value: id,
                            },
                        );
                    }
                    self.finish(id, Some(KvOutcome::Cancelled));
                }
            }
            KvMsg::Heartbeat { .. } => {}
            other => log::warn!("decoder got unexpected {other:?} from {from}"),
        }
    }

    fn heartbeat(&mut self) {
        let now = Instant::now();
        let timeout = self.cfg.heartbeat_timeout();
        let mut live: HashSet<NetAddr> = HashSet::new();
        for r in self.reqs.values().filter(|r| r.state != State::Decoding) {
            live.extend(r.targets.iter().cloned());
        }
        self.last_seen.retain(|a, _| live.contains(a));
        let silent: HashSet<NetAddr> = self.last_seen.iter().filter(|(_, t)| now - **t > timeout).map(|(a, _)| a.clone()).collect();
        if !silent.is_empty() {
            let dead: Vec<u64> = self
                .reqs
                .iter()
                .filter(|(_, r)| r.state != State::Decoding && r.targets.iter().any(|t| silent.contains(t)))
                .map(|(id, _)| *id)
                .collect();
            for id in dead {
                log::warn!("prefiller silent; request {id} timed out");
                // Ask the reachable prefillers to stop as well.
                let targets = self.reqs[&id].targets.clone();
                for t in targets.iter().filter(|t| !silent.contains(*t)) {
                    self.send(t, &KvMsg::Cancel { id }, OnDone::Ignore);
                }
                self.finish(id, Some(KvOutcome::TimedOut));
            }
            for a in &silent {
                self.last_seen.remove(a);
            }
        }
        self.seq += 1;
        for a in self.last_seen.keys() {
            self.send(a, &KvMsg::Heartbeat { seq: self.seq }, OnDone::Ignore);
        }
    }

    /// Forgets the request and returns its pages, imm and context slot.
    fn finish(&mut self, id: u64, outcome: Option<KvOutcome>) {
        let Some(r) = self.reqs.remove(&id) else { return };
        self.engine.retire_imm(r.handle.imm);
        self.imms.free(r.handle.imm);
        self.free_pages.extend(r.handle.pages.iter().copied());
        if let Some(s) = r.handle.context_slot {
            self.free_slots.push(s);
        }
        if let Some(o) = outcome {
            let mut g = r.handle.slot.outcome.lock().unwrap();
            *g = Some(o);
            r.handle.slot.cv.notify_all();
        }
    }
}
