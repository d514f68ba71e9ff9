use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use super::msg::{KvMsg, PrefillRequest};
use super::shard::HeadSlice;
use super::{context_byte, kv_byte, KvConfig, MSG_BYTES, RECV_SLOTS};
use crate::engine::{TransferEngine, WatchWord};
use crate::error::{Result, TransferError};
use crate::mem::DeviceBuffer;
use crate::types::{Device, MrHandle, NetAddr, OnDone, Pages};
use crate::wire::Wire;

const TOMBSTONES: usize = 4096;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillStats {
    pub requests: u64,
    pub completed: u64,
    pub cancelled: u64,
    pub writes: u64,
}

#[allow(clippy::large_enum_variant)]
enum Event {
    Msg(NetAddr, KvMsg),
    Layer { id: u64, new: u64 },
    ContextReady(u64),
    Done { id: u64, ok: bool },
    Stop,
}

struct Job {
    id: u64,
    chunks: u32,
    local: Vec<u32>,
    ranges: Vec<std::ops::Range<usize>>,
    slot: u32,
    context_len: u64,
    word: Arc<WatchWord>,
    cancelled: Arc<AtomicBool>,
}

struct Active {
    req: PrefillRequest,
    local: Vec<u32>,
    slot: u32,
    _word: Arc<WatchWord>,
    cancelled: Arc<AtomicBool>,
    issued: u32,
    context_ready: bool,
    context_sent: bool,
    inflight: u32,
    /// Cleared when the decoder went silent; nobody is left to confirm to.
    confirm: bool,
}

/// Serves prefill requests: computes layers on a "device" thread and
/// pushes each finished layer to the requesting decoder.
pub struct Prefiller {
    engine: TransferEngine,
    tx: Sender<Event>,
    stats: Arc<Stats>,
    threads: Vec<JoinHandle<()>>,
}

#[derive(Default)]
struct Stats {
    requests: AtomicU64,
    completed: AtomicU64,
    cancelled: AtomicU64,
    writes: AtomicU64,
}

impl Prefiller {
    /// `slice` is the part of each page this prefiller holds.
    pub fn new(engine: TransferEngine, cfg: KvConfig, slice: HeadSlice) -> Result<Self> {
        if slice.len == 0 || slice.offset + slice.len > cfg.page_bytes {
            return Err(TransferError::Invalid(format!("head slice {slice:?} outside a {} byte page", cfg.page_bytes)));
        }
        let kv = DeviceBuffer::new((cfg.layers as u64 * cfg.pages as u64 * slice.len) as usize);
        let (kv_h, _) = engine.reg_mr(&kv, Device::Gpu(0))?;
        let ctx = DeviceBuffer::new((cfg.max_requests as u64 * cfg.context_bytes.max(1)) as usize);
        let (ctx_h, _) = engine.reg_mr(&ctx, Device::Gpu(0))?;
        let (tx, rx) = unbounded();
        let (jobs_tx, jobs_rx) = unbounded::<Job>();
        let handler_tx = tx.clone();
        engine.submit_recvs(MSG_BYTES, RECV_SLOTS, move |m| match KvMsg::decode(&m.bytes()) {
            Ok(msg) => {
                let _ = handler_tx.send(Event::Msg(m.from.clone(), msg));
            }
            Err(e) => log::warn!("dropping malformed kv message from {}: {e}", m.from),
        })?;
        let stats = Arc::new(Stats::default());
        let compute = {
            let (cfg, kv, ctx, tx) = (cfg.clone(), kv.clone(), ctx.clone(), tx.clone());
            std::thread::Builder::new()
                .name(format!("{}-prefill", engine.name()))
                .spawn(move || compute_loop(cfg, slice, kv, ctx, jobs_rx, tx))
                .expect("spawn compute thread")
        };
        let proto = Protocol {
            engine: engine.clone(),
            cfg,
            slice,
            kv_h,
            ctx_h,
            tx: tx.clone(),
            jobs: jobs_tx,
            free_pages: VecDeque::new(),
            free_slots: Vec::new(),
            active: HashMap::new(),
            queued: VecDeque::new(),
            tombstones: (HashSet::new(), VecDeque::new()),
            peers: HashMap::new(),
            stats: stats.clone(),
            seq: 0,
        };
        let protocol = std::thread::Builder::new()
            .name(format!("{}-kvproto", engine.name()))
            .spawn(move || proto.run(rx))
            .expect("spawn protocol thread");
        Ok(Self { engine, tx, stats, threads: vec![protocol, compute] })
    }

    pub fn engine(&self) -> &TransferEngine {
        &self.engine
    }

    pub fn stats(&self) -> PrefillStats {
        let s = &self.stats;
        PrefillStats {
            requests: s.requests.load(Ordering::Relaxed),
            completed: s.completed.load(Ordering::Relaxed),
            cancelled: s.cancelled.load(Ordering::Relaxed),
            writes: s.writes.load(Ordering::Relaxed),
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let _ = self.tx.send(Event::Stop);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Prefiller {
    fn drop(&mut self) {
        self.stop();
    }
}

fn compute_loop(cfg: KvConfig, slice: HeadSlice, kv: Arc<DeviceBuffer>, ctx: Arc<DeviceBuffer>, jobs: Receiver<Job>, tx: Sender<Event>) {
    let local_stride = cfg.pages as u64 * slice.len;
    let mut page = vec![0u8; slice.len as usize];
    while let Ok(job) = jobs.recv() {
        'chunks: for chunk in 0..job.chunks {
            for layer in 0..cfg.layers {
                if job.cancelled.load(Ordering::Acquire) {
                    break 'chunks;
                }
                for pos in job.ranges[chunk as usize].clone() {
                    for (j, b) in page.iter_mut().enumerate() {
                        *b = kv_byte(job.id, layer, pos as u32, slice.offset + j as u64);
                    }
                    let at = layer as u64 * local_stride + job.local[pos] as u64 * slice.len;
                    kv.write(at as usize, &page);
                }
                if !cfg.layer_time.is_zero() {
                    std::thread::sleep(cfg.layer_time);
                }
                job.word.fetch_add(1);
            }
        }
        if job.context_len > 0 && !job.cancelled.load(Ordering::Acquire) {
            let base = job.slot as u64 * cfg.context_bytes;
            let bytes: Vec<u8> = (0..job.context_len).map(|i| context_byte(job.id, i)).collect();
            ctx.write(base as usize, &bytes);
        }
        let _ = tx.send(Event::ContextReady(job.id));
    }
}

fn on_done(tx: &Sender<Event>, id: u64) -> OnDone {
    let tx = tx.clone();
    OnDone::callback(move |r| {
        let _ = tx.send(Event::Done { id, ok: r.is_ok() });
    })
}

struct Protocol {
    engine: TransferEngine,
    cfg: KvConfig,
    slice: HeadSlice,
    kv_h: MrHandle,
    ctx_h: MrHandle,
    tx: Sender<Event>,
    jobs: Sender<Job>,
    free_pages: VecDeque<u32>,
    free_slots: Vec<u32>,
    active: HashMap<u64, Active>,
    queued: VecDeque<(NetAddr, PrefillRequest)>,
    tombstones: (HashSet<u64>, VecDeque<u64>),
    /// Decoders with live requests and when we last heard from them.
    peers: HashMap<NetAddr, Instant>,
    stats: Arc<Stats>,
    seq: u64,
}

impl Protocol {
    fn run(mut self, rx: Receiver<Event>) {
        self.free_pages = (0..self.cfg.pages).collect();
        self.free_slots = (0..self.cfg.max_requests).rev().collect();
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
                Event::Msg(from, msg) => self.message(from, msg),
                Event::Layer { id, new } => self.layer(id, new),
                Event::ContextReady(id) => {
                    if let Some(a) = self.active.get_mut(&id) {
                        a.context_ready = true;
                    }
                    self.advance(id);
                }
                Event::Done { id, ok } => {
                    if let Some(a) = self.active.get_mut(&id) {
                        a.inflight -= 1;
                        if !ok {
                            log::warn!("kv write for request {id} failed");
                        }
                    }
                    self.advance(id);
                }
                Event::Stop => unreachable!(),
            }
        }
    }

    fn send(&self, to: &NetAddr, msg: KvMsg) {
        if let Err(e) = self.engine.submit_send(to, &msg.encode(), OnDone::Ignore) {
            log::warn!("send to {to} failed: {e}");
        }
    }

    fn heartbeat(&mut self) {
        let timeout = self.cfg.heartbeat_timeout();
        let now = Instant::now();
        let silent: Vec<NetAddr> = self.peers.iter().filter(|(_, t)| now - **t > timeout).map(|(a, _)| a.clone()).collect();
        for peer in silent {
            log::warn!("decoder {peer} silent; dropping its requests");
            let ids: Vec<u64> = self.active.iter().filter(|(_, a)| a.req.reply == peer).map(|(id, _)| *id).collect();
            for id in ids {
                self.cancel(id, false);
            }
            self.queued.retain(|(_, r)| r.reply != peer);
            self.peers.remove(&peer);
        }
        self.seq += 1;
        for peer in self.peers.keys() {
            self.send(peer, KvMsg::Heartbeat { seq: self.seq });
        }
    }

    fn message(&mut self, from: NetAddr, msg: KvMsg) {
        match msg {
            KvMsg::Request(req) => {
                self.stats.requests.fetch_add(1, Ordering::Relaxed);
                if self.tombstones.0.contains(&req.id) {
                    // The cancellation overtook the request.
                    return;
                }
                self.peers.insert(req.reply.clone(), Instant::now());
                self.queued.push_back((from, req));
                self.admit();
            }
            KvMsg::Cancel { id } => {
                if let Some(p) = self.peers.get_mut(&from) {
                    *p = Instant::now();
                }
                self.tombstone(id);
                if let Some(pos) = self.queued.iter().position(|(_, r)| r.id == id) {
                    let (_, r) = self.queued.remove(pos).unwrap();
                    self.stats.cancelled.fetch_add(1, Ordering::Relaxed);
                    self.send(&r.reply, KvMsg::CancelConfirm { id });
                } else if self.active.contains_key(&id) {
                    self.cancel(id, true);
                } else {
                    // Finished or never seen: nothing can still write.
                    self.send(&from, KvMsg::CancelConfirm { id });
                }
            }
            KvMsg::Heartbeat { .. } => {
                if let Some(p) = self.peers.get_mut(&from) {
                    *p = Instant::now();
                }
            }
            KvMsg::CancelConfirm { .. } => log::warn!("unexpected confirmation from {from}"),
        }
    }

    fn tombstone(&mut self, id: u64) {
        let (set, order) = &mut self.tombstones;
        if set.insert(id) {
            order.push_back(id);
            if order.len() > TOMBSTONES {
                set.remove(&order.pop_front().unwrap());
            }
        }
    }

    fn admit(&mut self) {
        while let Some((_, req)) = self.queued.front() {
            let n = req.pages.indices.len();
            let bad = req.page_len != self.slice.len
                || req.context.as_ref().is_some_and(|c| c.len > self.cfg.context_bytes)
                || n > self.cfg.pages as usize;
            if bad {
                let (_, req) = self.queued.pop_front().unwrap();
                log::error!("request {} does not fit this prefiller; dropping", req.id);
                continue;
            }
            if self.free_pages.len() < n || self.free_slots.is_empty() {
                return;
            }
            let (_, req) = self.queued.pop_front().unwrap();
            let local: Vec<u32> = self.free_pages.drain(..n).collect();
            let slot = self.free_slots.pop().unwrap();
            let id = req.id;
            let tx = self.tx.clone();
            let word = self.engine.alloc_uvm_watcher(move |_, new| {
                let _ = tx.send(Event::Layer { id, new });
            });
            let cancelled = Arc::new(AtomicBool::new(false));
            let job = Job {
                id,
                chunks: req.chunks,
                ranges: (0..req.chunks).map(|c| req.chunk_range(c)).collect(),
                local: local.clone(),
                slot,
                context_len: req.context.as_ref().map_or(0, |c| c.len),
                word: word.clone(),
                cancelled: cancelled.clone(),
            };
            self.active.insert(
                id,
                Active {
                    req,
                    local,
                    slot,
                    _word: word,
                    cancelled,
                    issued: 0,
                    context_ready: false,
                    context_sent: false,
                    inflight: 0,
                    confirm: true,
                },
            );
            let _ = self.jobs.send(job);
        }
    }

    /// Issues the paged writes for every step up to watcher value `new`.
    fn layer(&mut self, id: u64, new: u64) {
        let layers = self.cfg.layers;
        let local_stride = self.cfg.pages as u64 * self.slice.len;
        let Some(a) = self.active.get_mut(&id) else { return };
        if a.cancelled.load(Ordering::Acquire) {
            return;
        }
        let total = layers * a.req.chunks;
        let target = (new as u32).min(total);
        let mut writes = Vec::new();
        while a.issued < target {
            let step = a.issued;
            let (chunk, layer) = (step / layers, step % layers);
            let range = a.req.chunk_range(chunk);
            let src = Pages { indices: a.local[range.clone()].to_vec(), stride: self.slice.len, offset: layer as u64 * local_stride };
            let dst = Pages {
                indices: a.req.pages.indices[range].to_vec(),
                stride: a.req.pages.stride,
                offset: a.req.pages.offset + layer as u64 * a.req.layer_stride,
            };
            writes.push((src, dst));
            a.issued += 1;
        }
        let (kv, imm, page_len) = (a.req.kv.clone(), a.req.imm, a.req.page_len);
        for (src, dst) in writes {
            let od = on_done(&self.tx, id);
            match self.engine.submit_paged_writes(page_len, Some(imm), (self.kv_h, &src), (&kv, &dst), od) {
                Ok(()) => {
                    self.active.get_mut(&id).unwrap().inflight += 1;
                    self.stats.writes.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => log::error!("request {id}: paged write rejected: {e}"),
            }
        }
        self.advance(id);
    }

    /// Sends the context once all layers went out, and retires finished or
    /// cancelled requests.
    fn advance(&mut self, id: u64) {
        let total_steps = self.cfg.layers;
        let context_bytes = self.cfg.context_bytes;
        let Some(a) = self.active.get_mut(&id) else { return };
        let cancelled = a.cancelled.load(Ordering::Acquire);
        let steps_done = a.issued == total_steps * a.req.chunks;
        if !cancelled && steps_done && a.context_ready && !a.context_sent {
            a.context_sent = true;
            if let Some(c) = a.req.context.clone() {
                let src_off = a.slot as u64 * context_bytes;
                let od = on_done(&self.tx, id);
                match self.engine.submit_single_write(c.len, Some(a.req.imm), (self.ctx_h, src_off), (&c.desc, c.offset), od) {
                    Ok(()) => {
                        a.inflight += 1;
                        self.stats.writes.fetch_add(1, Ordering::Relaxed);
                    }
                    Err(e) => log::error!("request {id}: context write rejected: {e}"),
                }
            }
        }
        let a = self.active.get(&id).unwrap();
        let finished = steps_done && a.context_sent;
        if a.inflight == 0 && (cancelled || finished) {
            let a = self.active.remove(&id).unwrap();
            self.free_pages.extend(a.local);
            self.free_slots.push(a.slot);
            if cancelled {
                self.stats.cancelled.fetch_add(1, Ordering::Relaxed);
                if a.confirm {
                    self.send(&a.req.reply, KvMsg::CancelConfirm { id });
                }
            } else {
                self.stats.completed.fetch_add(1, Ordering::Relaxed);
            }
            if !self.active.values().any(|x| x.req.reply == a.req.reply) && !self.queued.iter().any(|(_, r)| r.reply == a.req.reply) {
                self.peers.remove(&a.req.reply);
            }
            self.admit();
        }
    }

    /// Stops all future transfers of `id`; confirmation follows once the
    /// issued ones completed. `confirm` is false when the decoder is gone.
    fn cancel(&mut self, id: u64, confirm: bool) {
        let Some(a) = self.active.get_mut(&id) else { return };
        a.cancelled.store(true, Ordering::Release);
        a.confirm &= confirm;
        self.advance(id);
    }
}
