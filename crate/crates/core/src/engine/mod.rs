//! The transfer engine.
//!
//! An engine owns one domain group per device. Each group has 1..N rails and
//! one worker thread; the public API validates a request on the calling
//! thread, turns it into work requests and hands them to the owning worker.
//! Completion of an operation is reported through [`OnDone`] once every
//! work request belonging to it completed. Receivers learn about incoming
//! writes only through immediate counters ([`TransferEngine::expect_imm_count`]).
//!
//! No ordering is promised between any two operations. When an operation
//! with an immediate needs more than one work request, the immediate travels
//! on an extra zero-length write posted after all payload requests
//! completed, so the receiver's counter moves only once the whole operation
//! is visible.

mod callback;
mod imm;
pub mod shard;
mod watcher;
mod worker;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Sender};

pub use watcher::WatchWord;
pub use worker::{MsgHandler, RecvMsg};

use self::callback::{CallbackSender, CallbackThread};
use self::imm::ImmCounterTable;
use self::watcher::Watchers;
use self::worker::{Command, PlannedWr, Transfer, Worker};
use crate::error::{Result, TransferError};
use crate::mem::DeviceBuffer;
use crate::trace::Trace;
use crate::transport::{Bell, Doorbell, RemoteSlice, SrcSlice, Transport, WorkRequest, WrOp};
use crate::types::{Device, MrDesc, MrHandle, NetAddr, OnDone, Pages, PeerGroupHandle, ScatterDst};
use crate::vclock;

const QUEUE_DEPTH: usize = 4096;

static NEXT_ENGINE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone)]
pub struct EngineConfig {
    pub name: String,
    /// Number of domain groups; group 0 also serves host memory.
    pub groups: usize,
    pub rails: usize,
    /// Single writes longer than this are split across all rails.
    pub split_threshold: usize,
    pub trace: Option<Arc<Trace>>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { name: "engine".into(), groups: 1, rails: 1, split_threshold: 1 << 20, trace: None }
    }
}

impl EngineConfig {
    pub fn named(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Self::default() }
    }

    pub fn rails(mut self, rails: usize) -> Self {
        self.rails = rails;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn trace(mut self, trace: Option<Arc<Trace>>) -> Self {
        self.trace = trace;
        self
    }
}

/// State shared between the API side and the workers.
pub(crate) struct Shared {
    pub name: String,
    pub imm: ImmCounterTable,
    pub cbs: CallbackSender,
    pub trace: Option<Arc<Trace>>,
}

struct GroupLink {
    tx: Sender<Command>,
    bell: Doorbell,
    addrs: Vec<NetAddr>,
    max_wr: usize,
}

struct RegionEntry {
    handle: MrHandle,
    buf: Arc<DeviceBuffer>,
    offset: usize,
    rkeys: Vec<u64>,
}

struct Inner {
    id: u64,
    name: String,
    cfg: EngineConfig,
    shared: Arc<Shared>,
    groups: Vec<GroupLink>,
    regions: Mutex<HashMap<u64, RegionEntry>>,
    peer_groups: Mutex<HashMap<u64, Vec<NetAddr>>>,
    next_id: AtomicU64,
    rr: AtomicUsize,
    shut: AtomicBool,
    workers: Mutex<Vec<JoinHandle<()>>>,
    callbacks: Mutex<CallbackThread>,
    watchers: Watchers,
}

/// Handle to an engine. Clones share the engine; it shuts down when the
/// last clone is dropped or [`TransferEngine::shutdown`] is called.
///
/// Callbacks run on one callback thread per engine and must not block it for
/// long.
#[derive(Clone)]
pub struct TransferEngine {
    inner: Arc<Inner>,
}

impl TransferEngine {
    pub fn new(transport: &dyn Transport, cfg: EngineConfig) -> Result<Self> {
        if cfg.groups == 0 || cfg.rails == 0 {
            return Err(TransferError::Invalid("engine needs at least one group and one rail".into()));
        }
        let id = NEXT_ENGINE.fetch_add(1, Ordering::Relaxed);
        let callbacks = CallbackThread::spawn(&cfg.name);
        let shared =
            Arc::new(Shared { name: cfg.name.clone(), imm: ImmCounterTable::default(), cbs: callbacks.sender(), trace: cfg.trace.clone() });
        let mut groups = Vec::with_capacity(cfg.groups);
        let mut workers = Vec::with_capacity(cfg.groups);
        for g in 0..cfg.groups {
            let domains = transport.open_group(cfg.rails)?;
            let addrs: Vec<NetAddr> = domains.iter().map(|d| d.addr().clone()).collect();
            let max_wr = domains.iter().map(|d| d.max_wr_size()).min().unwrap_or(usize::MAX);
            let (tx, rx) = bounded(QUEUE_DEPTH);
            let bell = Bell::new();
            let worker = Worker::new(g, domains, rx, tx.clone(), bell.clone(), shared.clone());
            workers.push(
                std::thread::Builder::new()
                    .name(format!("{}-g{g}", cfg.name))
                    .spawn(move || worker.run())
                    .map_err(|e| TransferError::Transport(e.to_string()))?,
            );
            groups.push(GroupLink { tx, bell, addrs, max_wr });
        }
        Ok(Self {
            inner: Arc::new(Inner {
                id,
                name: cfg.name.clone(),
                watchers: Watchers::new(&cfg.name),
                cfg,
                shared,
                groups,
                regions: Mutex::new(HashMap::new()),
                peer_groups: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
                rr: AtomicUsize::new(0),
                shut: AtomicBool::new(false),
                workers: Mutex::new(workers),
                callbacks: Mutex::new(callbacks),
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Address of the first rail of the first group; used for discovery and
    /// messaging.
    pub fn main_address(&self) -> NetAddr {
        self.inner.groups[0].addrs[0].clone()
    }

    pub fn group_addrs(&self, group: usize) -> &[NetAddr] {
        &self.inner.groups[group].addrs
    }

    pub fn rails(&self) -> usize {
        self.inner.cfg.rails
    }

    pub fn groups(&self) -> usize {
        self.inner.groups.len()
    }

    pub fn trace(&self) -> Option<&Arc<Trace>> {
        self.inner.cfg.trace.as_ref()
    }

    fn next_id(&self) -> u64 {
        self.inner.next_id.fetch_add(1, Ordering::Relaxed)
    }

    fn send(&self, group: usize, cmd: Command) -> Result<()> {
        if self.inner.shut.load(Ordering::Acquire) {
            return Err(TransferError::Shutdown);
        }
        let link = &self.inner.groups[group];
        link.tx.send(cmd).map_err(|_| TransferError::Shutdown)?;
        link.bell.ring();
        Ok(())
    }

    /// Registers the whole buffer.
    pub fn reg_mr(&self, buf: &Arc<DeviceBuffer>, device: Device) -> Result<(MrHandle, MrDesc)> {
        self.reg_mr_range(buf, 0, buf.len(), device)
    }

    /// Registers `buf[offset..offset+len]`. Ranges on one device may not
    /// overlap.
    pub fn reg_mr_range(&self, buf: &Arc<DeviceBuffer>, offset: usize, len: usize, device: Device) -> Result<(MrHandle, MrDesc)> {
        let group = device.group();
        if group >= self.inner.groups.len() {
            return Err(TransferError::UnknownDevice(group));
        }
        if offset.checked_add(len).is_none_or(|e| e > buf.len()) {
            return Err(TransferError::Bounds(format!("register {offset}+{len} of a {} byte buffer", buf.len())));
        }
        let base = buf.addr() + offset as u64;
        let id = self.next_id();
        let handle = MrHandle { engine: self.inner.id, id, base, len: len as u64, device };
        {
            // Reserve the range before talking to the worker so concurrent
            // registrations cannot both pass the overlap check.
            let mut regions = self.inner.regions.lock().unwrap();
            let overlaps = regions.values().any(|r| {
                r.handle.device == device
                    && len > 0
                    && r.handle.len > 0
                    && base < r.handle.base + r.handle.len
                    && r.handle.base < base + len as u64
            });
            if overlaps {
                return Err(TransferError::Overlap);
            }
            regions.insert(id, RegionEntry { handle, buf: buf.clone(), offset, rkeys: Vec::new() });
        }
        let (reply, rx) = bounded(1);
        let sent = self.send(group, Command::Register { buf: buf.clone(), offset, len, base, reply });
        let keys = sent.and_then(|_| rx.recv().map_err(|_| TransferError::Shutdown)?);
        let mut regions = self.inner.regions.lock().unwrap();
        let keys = match keys {
            Ok(k) => k,
            Err(e) => {
                regions.remove(&id);
                return Err(e);
            }
        };
        let desc =
            MrDesc { base, len: len as u64, rkeys: self.inner.groups[group].addrs.iter().cloned().zip(keys.iter().copied()).collect() };
        regions.get_mut(&id).unwrap().rkeys = keys;
        Ok((handle, desc))
    }

    pub fn dereg_mr(&self, handle: MrHandle) -> Result<()> {
        let entry = self.lookup_remove(handle)?;
        self.send(handle.device.group(), Command::Deregister(entry.rkeys))
    }

    fn lookup_remove(&self, h: MrHandle) -> Result<RegionEntry> {
        if h.engine != self.inner.id {
            return Err(TransferError::UnknownRegion);
        }
        self.inner.regions.lock().unwrap().remove(&h.id).ok_or(TransferError::UnknownRegion)
    }

    fn source(&self, h: MrHandle) -> Result<(Arc<DeviceBuffer>, usize)> {
        if h.engine != self.inner.id {
            return Err(TransferError::UnknownRegion);
        }
        let regions = self.inner.regions.lock().unwrap();
        let r = regions.get(&h.id).filter(|r| r.handle == h).ok_or(TransferError::UnknownRegion)?;
        Ok((r.buf.clone(), r.offset))
    }

    fn check_desc(&self, desc: &MrDesc) -> Result<()> {
        desc.validate()?;
        if desc.rkeys.len() != self.inner.cfg.rails {
            return Err(TransferError::Invalid(format!("descriptor has {} rails, engine has {}", desc.rkeys.len(), self.inner.cfg.rails)));
        }
        Ok(())
    }

    fn write_wr(&self, tid: u64, src: SrcSlice, desc: &MrDesc, rail: usize, addr: u64, imm: Option<u32>, vt: u64) -> PlannedWr {
        let (peer, rkey) = desc.rkeys[rail].clone();
        PlannedWr {
            rail,
            wr: WorkRequest {
                wr_id: self.next_id(),
                transfer_id: tid,
                op: WrOp::Write { src, dst: RemoteSlice { peer, addr, rkey } },
                imm,
                issued_at: vt,
            },
        }
    }

    fn empty_src() -> SrcSlice {
        SrcSlice { buf: DeviceBuffer::new(0), offset: 0, len: 0 }
    }

    /// Wraps planned writes into a transfer; attaches `imm` to the only
    /// write, or to a trailing fence when there are several.
    fn submit_planned(
        &self,
        group: usize,
        tid: u64,
        mut wrs: Vec<PlannedWr>,
        imm: Option<u32>,
        fence_target: (&MrDesc, usize, u64),
        on_done: OnDone,
        vt: u64,
    ) -> Result<()> {
        let mut fence = None;
        if let Some(imm) = imm {
            match wrs.len() {
                0 => wrs.push(self.write_wr(tid, Self::empty_src(), fence_target.0, fence_target.1, fence_target.2, Some(imm), vt)),
                1 => wrs[0].wr.imm = Some(imm),
                _ => fence = Some(self.write_wr(tid, Self::empty_src(), fence_target.0, fence_target.1, fence_target.2, Some(imm), vt)),
            }
        }
        self.send(group, Command::Submit(Transfer { id: tid, wrs, fence, on_done, vt }))
    }

    /// One-sided write of `len` bytes. With `imm`, the receiver's counter
    /// for it moves by exactly one after the whole payload landed.
    pub fn submit_single_write(
        &self,
        len: u64,
        imm: Option<u32>,
        src: (MrHandle, u64),
        dst: (&MrDesc, u64),
        on_done: OnDone,
    ) -> Result<()> {
        let (h, src_off) = src;
        let (desc, dst_off) = dst;
        let (buf, base_off) = self.source(h)?;
        self.check_desc(desc)?;
        if src_off.checked_add(len).is_none_or(|e| e > h.len) {
            return Err(TransferError::Bounds(format!("source {src_off}+{len} of {}", h.len)));
        }
        if dst_off.checked_add(len).is_none_or(|e| e > desc.len) {
            return Err(TransferError::Bounds(format!("destination {dst_off}+{len} of {}", desc.len)));
        }
        if len == 0 && imm.is_none() {
            return Err(TransferError::Invalid("zero-length write needs an immediate".into()));
        }
        let vt = vclock::now();
        let tid = self.next_id();
        let group = h.device.group();
        let rails = self.inner.cfg.rails;
        let len = len as usize;
        let pieces = if len > self.inner.cfg.split_threshold && rails > 1 {
            shard::split_even(len, rails)
        } else if len > 0 {
            vec![(self.inner.rr.fetch_add(1, Ordering::Relaxed) % rails, 0, len)]
        } else {
            vec![]
        };
        let pieces = shard::cap_pieces(pieces, self.inner.groups[group].max_wr);
        let wrs = pieces
            .into_iter()
            .map(|(rail, off, n)| {
                let src = SrcSlice { buf: buf.clone(), offset: base_off + src_off as usize + off, len: n };
                self.write_wr(tid, src, desc, rail, desc.base + dst_off + off as u64, None, vt)
            })
            .collect();
        let fence_rail = self.inner.rr.load(Ordering::Relaxed) % rails;
        self.submit_planned(group, tid, wrs, imm, (desc, fence_rail, desc.base + dst_off), on_done, vt)
    }

    /// Copies page `src.indices[i]` to page `dst.indices[i]` for every `i`,
    /// rotating pages over the rails.
    pub fn submit_paged_writes(
        &self,
        page_len: u64,
        imm: Option<u32>,
        src: (MrHandle, &Pages),
        dst: (&MrDesc, &Pages),
        on_done: OnDone,
    ) -> Result<()> {
        let (h, sp) = src;
        let (desc, dp) = dst;
        let (buf, base_off) = self.source(h)?;
        self.check_desc(desc)?;
        if sp.indices.len() != dp.indices.len() {
            return Err(TransferError::Invalid(format!("{} source pages vs {} destination pages", sp.indices.len(), dp.indices.len())));
        }
        if !sp.check_bounds(page_len, h.len) {
            return Err(TransferError::Bounds("source page outside region".into()));
        }
        if !dp.check_bounds(page_len, desc.len) {
            return Err(TransferError::Bounds("destination page outside region".into()));
        }
        let vt = vclock::now();
        let tid = self.next_id();
        let group = h.device.group();
        let rails = self.inner.cfg.rails;
        let start = self.inner.rr.fetch_add(1, Ordering::Relaxed) % rails;
        let n = if page_len == 0 { 0 } else { sp.indices.len() };
        let mut wrs = Vec::with_capacity(n);
        for (i, rail) in shard::page_rails(n, rails, start).enumerate() {
            let so = base_off + sp.page_offset(i) as usize;
            let src = SrcSlice { buf: buf.clone(), offset: so, len: page_len as usize };
            wrs.push(self.write_wr(tid, src, desc, rail, desc.base + dp.page_offset(i), None, vt));
        }
        let fence_addr = desc.base + if dp.indices.is_empty() { 0 } else { dp.page_offset(0) };
        self.submit_planned(group, tid, wrs, imm, (desc, start, fence_addr), on_done, vt)
    }

    /// Runs `on_done` once `count` receipts of `imm` have been seen. Receipts
    /// that arrived before arming count. Consumed receipts are retired, so
    /// the value can be armed again afterwards.
    pub fn expect_imm_count(&self, imm: u32, count: u32, on_done: OnDone) -> Result<()> {
        match self.inner.shared.imm.arm(imm, count, on_done, vclock::now()) {
            Ok(Some((od, at))) => {
                self.inner.shared.cbs.fire(od, Ok(()), at);
                Ok(())
            }
            Ok(None) => Ok(()),
            Err((e, _)) => Err(e),
        }
    }

    /// Forgets unconsumed receipts of `imm`; an armed expectation is
    /// completed with [`TransferError::Cancelled`].
    pub fn retire_imm(&self, imm: u32) {
        if let Some(od) = self.inner.shared.imm.retire(imm) {
            self.inner.shared.cbs.fire(od, Err(TransferError::Cancelled), vclock::now());
        }
    }

    /// Total receipts ever seen for `imm`.
    pub fn imm_count(&self, imm: u32) -> u64 {
        self.inner.shared.imm.total(imm)
    }

    /// Sends a copy of `msg` to the engine whose main address is `to`. The
    /// caller may reuse `msg` immediately.
    pub fn submit_send(&self, to: &NetAddr, msg: &[u8], on_done: OnDone) -> Result<()> {
        let vt = vclock::now();
        let tid = self.next_id();
        let wr = WorkRequest {
            wr_id: self.next_id(),
            transfer_id: tid,
            op: WrOp::Send { peer: to.clone(), payload: Arc::from(msg) },
            imm: None,
            issued_at: vt,
        };
        self.send(0, Command::Submit(Transfer { id: tid, wrs: vec![PlannedWr { rail: 0, wr }], fence: None, on_done, vt }))
    }

    /// Posts `cnt` receive buffers of `len` bytes; each incoming message runs
    /// `handler` on the callback thread, after which its buffer is reposted.
    pub fn submit_recvs(&self, len: usize, cnt: usize, handler: impl Fn(&RecvMsg) + Send + Sync + 'static) -> Result<()> {
        let handler: MsgHandler = Arc::new(handler);
        for _ in 0..cnt {
            self.send(0, Command::PostRecv(DeviceBuffer::new(len), handler.clone()))?;
        }
        Ok(())
    }

    pub fn add_peer_group(&self, addrs: Vec<NetAddr>) -> PeerGroupHandle {
        let id = self.next_id();
        self.inner.peer_groups.lock().unwrap().insert(id, addrs);
        PeerGroupHandle(id)
    }

    fn peer_group(&self, h: PeerGroupHandle, descs: impl Iterator<Item = MrDesc>) -> Result<usize> {
        let groups = self.inner.peer_groups.lock().unwrap();
        let addrs = groups.get(&h.0).ok_or_else(|| TransferError::Invalid("unknown peer group".into()))?;
        let mut n = 0;
        for (i, d) in descs.enumerate() {
            if i >= addrs.len() || d.rkeys.first().map(|r| &r.0) != Some(&addrs[i]) {
                return Err(TransferError::Invalid(format!("destination {i} does not match the peer group")));
            }
            n += 1;
        }
        if n != addrs.len() {
            return Err(TransferError::Invalid(format!("{n} destinations for a group of {}", addrs.len())));
        }
        Ok(n)
    }

    /// One write per peer from per-peer slices of `src`. Each peer's write
    /// carries `imm`; zero-length entries become immediate-only writes (or
    /// are skipped without `imm`).
    pub fn submit_scatter(&self, h: PeerGroupHandle, on_done: OnDone, imm: Option<u32>, src: MrHandle, dsts: &[ScatterDst]) -> Result<()> {
        self.peer_group(h, dsts.iter().map(|d| d.dst.0.clone()))?;
        let (buf, base_off) = self.source(src)?;
        for (i, d) in dsts.iter().enumerate() {
            self.check_desc(&d.dst.0)?;
            if d.src.checked_add(d.len).is_none_or(|e| e > src.len) {
                return Err(TransferError::Bounds(format!("scatter source {i}")));
            }
            if d.dst.1.checked_add(d.len).is_none_or(|e| e > d.dst.0.len) {
                return Err(TransferError::Bounds(format!("scatter destination {i}")));
            }
            if d.len as usize > self.inner.groups[src.device.group()].max_wr {
                return Err(TransferError::Invalid(format!("scatter entry {i} exceeds the work request size")));
            }
        }
        let vt = vclock::now();
        let tid = self.next_id();
        let rails = self.inner.cfg.rails;
        let start = self.inner.rr.fetch_add(1, Ordering::Relaxed);
        let mut wrs = Vec::with_capacity(dsts.len());
        for (j, d) in dsts.iter().enumerate() {
            if d.len == 0 && imm.is_none() {
                continue;
            }
            let src = if d.len == 0 {
                Self::empty_src()
            } else {
                SrcSlice { buf: buf.clone(), offset: base_off + d.src as usize, len: d.len as usize }
            };
            let (desc, off) = &d.dst;
            wrs.push(self.write_wr(tid, src, desc, (start + j) % rails, desc.base + off, imm, vt));
        }
        self.send(src.device.group(), Command::Submit(Transfer { id: tid, wrs, fence: None, on_done, vt }))
    }

    /// Immediate-only write of `imm` to every destination.
    pub fn submit_barrier(&self, h: PeerGroupHandle, on_done: OnDone, imm: u32, dsts: &[MrDesc]) -> Result<()> {
        self.peer_group(h, dsts.iter().cloned())?;
        for d in dsts {
            self.check_desc(d)?;
        }
        let vt = vclock::now();
        let tid = self.next_id();
        let rails = self.inner.cfg.rails;
        let start = self.inner.rr.fetch_add(1, Ordering::Relaxed);
        let wrs = dsts
            .iter()
            .enumerate()
            .map(|(j, d)| self.write_wr(tid, Self::empty_src(), d, (start + j) % rails, d.base, Some(imm), vt))
            .collect();
        self.send(0, Command::Submit(Transfer { id: tid, wrs, fence: None, on_done, vt }))
    }

    /// Allocates a progress word polled by this engine's watcher thread.
    /// `cb(old, new)` runs on that thread whenever the word grew.
    pub fn alloc_uvm_watcher(&self, cb: impl FnMut(u64, u64) + Send + 'static) -> Arc<WatchWord> {
        self.inner.watchers.alloc(cb)
    }

    /// Lets in-flight operations finish (bounded wait), then closes every
    /// rail and stops the engine's threads. Idempotent.
    pub fn shutdown(&self) {
        self.inner.shutdown();
    }
}

impl Inner {
    fn shutdown(&self) {
        if self.shut.swap(true, Ordering::AcqRel) {
            return;
        }
        for g in &self.groups {
            let _ = g.tx.send(Command::Shutdown);
            g.bell.ring();
        }
        for h in self.workers.lock().unwrap().drain(..) {
            let _ = h.join();
        }
        self.watchers.stop();
        self.callbacks.lock().unwrap().stop();
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::sim::{FaultConfig, SimFabric};
    use std::time::Duration;

    fn pair(rails: usize) -> (Arc<SimFabric>, TransferEngine, TransferEngine) {
        let f = SimFabric::new(FaultConfig::default(), 3);
        let a = TransferEngine::new(&*f, EngineConfig::named("a").rails(rails)).unwrap();
        let b = TransferEngine::new(&*f, EngineConfig::named("b").rails(rails)).unwrap();
        (f, a, b)
    }

    #[test]
    fn registration_carries_one_rkey_per_rail() {
        let (_f, a, _b) = pair(2);
        let buf = DeviceBuffer::new(1 << 20);
        let (h, d) = a.reg_mr(&buf, Device::Host).unwrap();
        assert_eq!(d.rkeys.len(), 2);
        assert_eq!(h.len, 1 << 20);
        assert_eq!(a.reg_mr(&buf, Device::Host).unwrap_err(), TransferError::Overlap);
        assert_eq!(a.reg_mr(&buf, Device::Gpu(3)).unwrap_err(), TransferError::UnknownDevice(3));
        a.dereg_mr(h).unwrap();
        a.reg_mr(&buf, Device::Host).unwrap();
    }

    #[test]
    fn foreign_handles_are_rejected() {
        let (_f, a, b) = pair(1);
        let buf = DeviceBuffer::new(64);
        let (h, d) = a.reg_mr(&buf, Device::Host).unwrap();
        let err = b.submit_single_write(8, None, (h, 0), (&d, 0), OnDone::Ignore).unwrap_err();
        assert_eq!(err, TransferError::UnknownRegion);
    }

    #[test]
    fn bounds_are_checked_at_submission() {
        let (_f, a, b) = pair(1);
        let sbuf = DeviceBuffer::new(64);
        let dbuf = DeviceBuffer::new(32);
        let (h, _) = a.reg_mr(&sbuf, Device::Host).unwrap();
        let (_, d) = b.reg_mr(&dbuf, Device::Host).unwrap();
        assert!(matches!(a.submit_single_write(64, None, (h, 0), (&d, 0), OnDone::Ignore), Err(TransferError::Bounds(_))));
        assert!(matches!(a.submit_single_write(8, None, (h, 60), (&d, 0), OnDone::Ignore), Err(TransferError::Bounds(_))));
        let pages = Pages { indices: vec![0, 1], stride: 16, offset: 0 };
        let far = Pages { indices: vec![0, 2], stride: 16, offset: 0 };
        assert!(a.submit_paged_writes(16, None, (h, &pages), (&d, &far), OnDone::Ignore).is_err());
        let one = Pages { indices: vec![0], stride: 16, offset: 0 };
        assert!(a.submit_paged_writes(16, None, (h, &pages), (&d, &one), OnDone::Ignore).is_err());
    }

    #[test]
    fn write_then_flag() {
        let (_f, a, b) = pair(2);
        let src = DeviceBuffer::from_bytes(&[5u8; 4096]);
        let dst = DeviceBuffer::new(4096);
        let (h, _) = a.reg_mr(&src, Device::Host).unwrap();
        let (_, d) = b.reg_mr(&dst, Device::Host).unwrap();
        let (od, flag) = OnDone::flag();
        let (rod, rflag) = OnDone::flag();
        b.expect_imm_count(7, 1, rod).unwrap();
        a.submit_single_write(4096, Some(7), (h, 0), (&d, 0), od).unwrap();
        flag.wait_timeout(Duration::from_secs(10)).unwrap().unwrap();
        rflag.wait_timeout(Duration::from_secs(10)).unwrap().unwrap();
        assert_eq!(dst.to_vec(), vec![5u8; 4096]);
        assert_eq!(b.imm_count(7), 1);
    }

    #[test]
    fn shutdown_is_idempotent_and_rejects_new_work() {
        let (_f, a, _b) = pair(1);
        a.shutdown();
        a.shutdown();
        assert_eq!(a.submit_send(&a.main_address(), b"x", OnDone::Ignore).unwrap_err(), TransferError::Shutdown);
    }
}
