//! In-process fabric with fault injection.
//!
//! Rails of every engine opened on one [`SimFabric`] can reach each other.
//! Posted work requests are staged on the sending rail and moved when that
//! rail is polled: the batch is cut into MTU-sized fragments, permuted
//! according to [`Reorder`], and applied straight into the receiver's
//! registered memory. An immediate is queued at the receiver only once every
//! fragment of its write has been applied.
//!
//! Timing is model time. Each rail serializes its writes at
//! `rail_bytes_per_sec`, adds a per-request overhead and a uniformly drawn
//! one-way latency; completions carry the resulting timestamps.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CompletionEvent, Domain, Doorbell, PostError, Region, Transport, WorkRequest, WrOp};
use crate::error::TransferError;
use crate::mem::DeviceBuffer;
use crate::trace::{Trace, TraceKind};
use crate::types::NetAddr;
use crate::vclock::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reorder {
    None,
    /// Random permutation within consecutive windows of this many fragments.
    Window(usize),
    /// Every flushed batch is delivered back to front.
    Reverse,
}

#[derive(Debug, Clone)]
pub struct FaultConfig {
    pub latency_min_ns: Nanos,
    pub latency_max_ns: Nanos,
    pub reorder: Reorder,
    /// Fragment size; `None` delivers each write as a single fragment.
    pub mtu: Option<usize>,
    /// Per-rail line rate; `None` means serialization takes no time.
    pub rail_bytes_per_sec: Option<u64>,
    pub wr_overhead_ns: Nanos,
    /// Maximum staged requests per rail before `post` pushes back.
    pub queue_depth: usize,
    pub max_wr_size: usize,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            latency_min_ns: 2_000,
            latency_max_ns: 5_000,
            reorder: Reorder::None,
            mtu: Some(4096),
            rail_bytes_per_sec: None,
            wr_overhead_ns: 500,
            queue_depth: 1024,
            max_wr_size: 1 << 30,
        }
    }
}

/// The fabric configurations the invariant suites are run under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FabricMode {
    InOrder,
    WindowRandom,
    Reverse,
    Mtu4k,
}

impl FabricMode {
    pub const ALL: [FabricMode; 4] = [Self::InOrder, Self::WindowRandom, Self::Reverse, Self::Mtu4k];

    pub fn config(self) -> FaultConfig {
        let base = FaultConfig { mtu: None, ..FaultConfig::default() };
        match self {
            Self::InOrder => base,
            Self::WindowRandom => FaultConfig { reorder: Reorder::Window(8), ..base },
            Self::Reverse => FaultConfig { reorder: Reorder::Reverse, ..base },
            Self::Mtu4k => FaultConfig { reorder: Reorder::Window(16), mtu: Some(4096), ..base },
        }
    }
}

struct Endpoint {
    addr: NetAddr,
    name: String,
    regions: RwLock<HashMap<u64, Region>>,
    cq: Mutex<VecDeque<CompletionEvent>>,
    recvs: Mutex<VecDeque<Arc<DeviceBuffer>>>,
    bell: Mutex<Option<Doorbell>>,
    alive: AtomicBool,
}

impl Endpoint {
    fn push(&self, ev: CompletionEvent) {
        self.cq.lock().unwrap().push_back(ev);
        if let Some(b) = self.bell.lock().unwrap().as_ref() {
            b.ring();
        }
    }
}

struct FabricInner {
    cfg: FaultConfig,
    seed: u64,
    trace: Option<Arc<Trace>>,
    endpoints: RwLock<HashMap<NetAddr, Arc<Endpoint>>>,
    next_node: AtomicU32,
}

pub struct SimFabric {
    inner: Arc<FabricInner>,
}

impl SimFabric {
    pub fn new(cfg: FaultConfig, seed: u64) -> Arc<Self> {
        Self::build(cfg, seed, None)
    }

    pub fn with_trace(cfg: FaultConfig, seed: u64, trace: Arc<Trace>) -> Arc<Self> {
        Self::build(cfg, seed, Some(trace))
    }

    fn build(cfg: FaultConfig, seed: u64, trace: Option<Arc<Trace>>) -> Arc<Self> {
        Arc::new(Self {
            inner: Arc::new(FabricInner { cfg, seed, trace, endpoints: RwLock::new(HashMap::new()), next_node: AtomicU32::new(0) }),
        })
    }

    pub fn config(&self) -> &FaultConfig {
        &self.inner.cfg
    }

    pub fn trace(&self) -> Option<&Arc<Trace>> {
        self.inner.trace.as_ref()
    }

    /// Makes every rail of `node` unreachable, as if the host died. Its own
    /// rails keep accepting posts but nothing they send arrives.
    pub fn kill(&self, node: u32) {
        let mut eps = self.inner.endpoints.write().unwrap();
        eps.retain(|a, ep| {
            let dead = a.as_sim().is_some_and(|(n, _)| n == node);
            if dead {
                ep.alive.store(false, Ordering::Release);
            }
            !dead
        });
    }
}

impl Transport for SimFabric {
    fn open_group(&self, rails: usize) -> Result<Vec<Box<dyn Domain>>, TransferError> {
        if rails == 0 || rails > u8::MAX as usize {
            return Err(TransferError::Invalid(format!("{rails} rails")));
        }
        let node = self.inner.next_node.fetch_add(1, Ordering::Relaxed);
        let mut out: Vec<Box<dyn Domain>> = Vec::with_capacity(rails);
        for rail in 0..rails {
            let addr = NetAddr::sim(node, rail as u8);
            let ep = Arc::new(Endpoint {
                name: addr.to_string(),
                addr: addr.clone(),
                regions: RwLock::new(HashMap::new()),
                cq: Mutex::new(VecDeque::new()),
                recvs: Mutex::new(VecDeque::new()),
                bell: Mutex::new(None),
                alive: AtomicBool::new(true),
            });
            self.inner.endpoints.write().unwrap().insert(addr, ep.clone());
            let seed = self.inner.seed ^ ((node as u64) << 8 | rail as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            out.push(Box::new(SimDomain {
                fabric: self.inner.clone(),
                ep,
                rng: ChaCha8Rng::seed_from_u64(seed),
                rail_busy: 0,
                staged: Vec::new(),
                local: VecDeque::new(),
                closed: false,
            }));
        }
        Ok(out)
    }

    fn virtual_time(&self) -> bool {
        true
    }
}

struct Staged {
    wr: WorkRequest,
    depart: Nanos,
    latency: Nanos,
}

struct WrState {
    remaining: usize,
    error: Option<String>,
    target: Option<Result<(Arc<Endpoint>, Region), String>>,
}

pub struct SimDomain {
    fabric: Arc<FabricInner>,
    ep: Arc<Endpoint>,
    rng: ChaCha8Rng,
    rail_busy: Nanos,
    staged: Vec<Staged>,
    local: VecDeque<CompletionEvent>,
    closed: bool,
}

impl SimDomain {
    fn ser_ns(&self, bytes: usize) -> Nanos {
        match self.fabric.cfg.rail_bytes_per_sec {
            Some(rate) if rate > 0 => (bytes as u128 * 1_000_000_000 / rate as u128) as Nanos,
            _ => 0,
        }
    }

    fn record(&self, vt: Nanos, kind: TraceKind) {
        if let Some(t) = &self.fabric.trace {
            t.record(vt, kind);
        }
    }

    fn lookup(&self, peer: &NetAddr) -> Option<Arc<Endpoint>> {
        self.fabric.endpoints.read().unwrap().get(peer).cloned()
    }

    fn resolve_target(&self, wr: &WorkRequest) -> Result<(Arc<Endpoint>, Region), String> {
        let WrOp::Write { src, dst } = &wr.op else { unreachable!() };
        let ep = self.lookup(&dst.peer).ok_or_else(|| format!("{} unreachable", dst.peer))?;
        let region =
            ep.regions.read().unwrap().get(&dst.rkey).cloned().ok_or_else(|| format!("unknown rkey {:#x} at {}", dst.rkey, dst.peer))?;
        region.resolve(dst.addr, src.len).ok_or_else(|| format!("write {:#x}+{} outside region at {}", dst.addr, src.len, dst.peer))?;
        Ok((ep, region))
    }

    fn flush(&mut self) {
        let batch = std::mem::take(&mut self.staged);
        let mtu = self.fabric.cfg.mtu.unwrap_or(usize::MAX).max(1);
        let mut frags: Vec<(usize, usize, usize)> = Vec::new();
        let mut states: Vec<WrState> = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let len = s.wr.len();
            let n = match s.wr.op {
                WrOp::Write { .. } if len > 0 => {
                    for k in 0..len.div_ceil(mtu) {
                        let off = k * mtu;
                        frags.push((i, off, mtu.min(len - off)));
                    }
                    len.div_ceil(mtu)
                }
                _ => {
                    frags.push((i, 0, len));
                    1
                }
            };
            states.push(WrState { remaining: n, error: None, target: None });
        }
        match self.fabric.cfg.reorder {
            Reorder::None => {}
            Reorder::Window(w) => {
                for chunk in frags.chunks_mut(w.max(1)) {
                    chunk.shuffle(&mut self.rng);
                }
            }
            Reorder::Reverse => frags.reverse(),
        }

        let alive = self.ep.alive.load(Ordering::Acquire);
        for (i, off, len) in frags {
            let s = &batch[i];
            let arrive = s.depart + self.ser_ns(off + len) + s.latency;
            if alive && states[i].error.is_none() {
                let res = match &s.wr.op {
                    WrOp::Write { src, dst } => {
                        if states[i].target.is_none() {
                            states[i].target = Some(self.resolve_target(&s.wr));
                        }
                        match states[i].target.as_ref().unwrap() {
                            Ok((ep, region)) => {
                                let at = region.resolve(dst.addr, src.len).unwrap() + off;
                                src.buf.copy_to(src.offset + off, &region.buf, at, len);
                                self.record(
                                    arrive,
                                    TraceKind::WriteApplied {
                                        at: ep.name.clone(),
                                        from: self.ep.name.clone(),
                                        addr: dst.addr + off as u64,
                                        len: len as u64,
                                    },
                                );
                                Ok(())
                            }
                            Err(e) => Err(e.clone()),
                        }
                    }
                    WrOp::Send { peer, payload } => self.deliver_msg(peer, payload, arrive),
                    WrOp::Recv { .. } => unreachable!("receives are not staged"),
                };
                if let Err(e) = res {
                    let to = s.wr.peer().map(|p| p.to_string()).unwrap_or_default();
                    self.record(arrive, TraceKind::DeliveryError { at: to, from: self.ep.name.clone(), reason: e.clone() });
                    states[i].error = Some(e);
                }
            } else if !alive {
                states[i].error = Some("sender is down".into());
            }
            states[i].remaining -= 1;
            if states[i].remaining > 0 {
                continue;
            }
            // Last fragment of this request.
            let imm_at = s.depart + self.ser_ns(s.wr.len()) + s.latency;
            let state = &mut states[i];
            if state.error.is_none() {
                if let (Some(imm), Some(Ok((ep, _)))) = (s.wr.imm, state.target.as_ref()) {
                    self.record(imm_at, TraceKind::ImmDelivered { at: ep.name.clone(), from: self.ep.name.clone(), imm });
                    ep.push(CompletionEvent::ImmReceived { imm, from: self.ep.addr.clone(), at: imm_at });
                }
            }
            let result = match state.error.take() {
                None => Ok(()),
                Some(e) => Err(TransferError::Delivery(e)),
            };
            self.local.push_back(CompletionEvent::SendDone {
                wr_id: s.wr.wr_id,
                transfer_id: s.wr.transfer_id,
                result,
                at: imm_at + s.latency,
            });
        }
    }

    fn deliver_msg(&self, peer: &NetAddr, payload: &[u8], at: Nanos) -> Result<(), String> {
        let ep = self.lookup(peer).ok_or_else(|| format!("{peer} unreachable"))?;
        let buf = ep.recvs.lock().unwrap().pop_front().ok_or_else(|| format!("no receive buffer posted at {peer}"))?;
        if payload.len() > buf.len() {
            ep.recvs.lock().unwrap().push_front(buf);
            return Err(format!("message of {} bytes exceeds receive buffer", payload.len()));
        }
        buf.write(0, payload);
        self.record(at, TraceKind::MsgDelivered { at: ep.name.clone(), from: self.ep.name.clone(), len: payload.len() as u64 });
        ep.push(CompletionEvent::MsgReceived { from: self.ep.addr.clone(), buf, len: payload.len(), at });
        Ok(())
    }
}

impl Domain for SimDomain {
    fn addr(&self) -> &NetAddr {
        &self.ep.addr
    }

    fn max_wr_size(&self) -> usize {
        self.fabric.cfg.max_wr_size
    }

    fn register(&mut self, buf: Arc<DeviceBuffer>, offset: usize, len: usize, base: u64) -> Result<u64, TransferError> {
        if offset.checked_add(len).is_none_or(|end| end > buf.len()) {
            return Err(TransferError::Bounds(format!("register {offset}+{len} of {}", buf.len())));
        }
        let mut regions = self.ep.regions.write().unwrap();
        let rkey = loop {
            let k: u64 = self.rng.gen();
            if k != 0 && !regions.contains_key(&k) {
                break k;
            }
        };
        regions.insert(rkey, Region { buf, offset, base, len: len as u64 });
        Ok(rkey)
    }

    fn deregister(&mut self, rkey: u64) {
        self.ep.regions.write().unwrap().remove(&rkey);
    }

    fn post(&mut self, wr: WorkRequest) -> Result<(), PostError> {
        if self.closed {
            return Err(PostError::Invalid("domain closed".into()));
        }
        let len = wr.len();
        if len > self.fabric.cfg.max_wr_size {
            return Err(PostError::Invalid(format!("{len} bytes exceeds max work request size")));
        }
        if let WrOp::Recv { buf } = wr.op {
            self.ep.recvs.lock().unwrap().push_back(buf);
            return Ok(());
        }
        if let WrOp::Write { src, .. } = &wr.op {
            if src.offset.checked_add(src.len).is_none_or(|end| end > src.buf.len()) {
                return Err(PostError::Invalid("source slice out of bounds".into()));
            }
            if len == 0 && wr.imm.is_none() {
                return Err(PostError::Invalid("zero-length write without immediate".into()));
            }
        }
        if self.staged.len() >= self.fabric.cfg.queue_depth {
            return Err(PostError::Backpressure(Box::new(wr)));
        }
        let depart = wr.issued_at.max(self.rail_busy) + self.fabric.cfg.wr_overhead_ns;
        self.rail_busy = depart + self.ser_ns(len);
        let (lo, hi) = (self.fabric.cfg.latency_min_ns, self.fabric.cfg.latency_max_ns);
        let latency = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
        self.staged.push(Staged { wr, depart, latency });
        Ok(())
    }

    fn poll(&mut self, max: usize, out: &mut Vec<CompletionEvent>) -> usize {
        if !self.staged.is_empty() {
            self.flush();
        }
        let before = out.len();
        while out.len() - before < max {
            match self.local.pop_front() {
                Some(ev) => out.push(ev),
                None => break,
            }
        }
        let room = max - (out.len() - before);
        if room > 0 {
            let mut cq = self.ep.cq.lock().unwrap();
            let n = room.min(cq.len());
            out.extend(cq.drain(..n));
        }
        out.len() - before
    }

    fn has_staged(&self) -> bool {
        !self.staged.is_empty()
    }

    fn set_doorbell(&mut self, bell: Doorbell) {
        *self.ep.bell.lock().unwrap() = Some(bell);
    }

    fn close(&mut self) {
        if std::mem::replace(&mut self.closed, true) {
            return;
        }
        self.ep.alive.store(false, Ordering::Release);
        let mut eps = self.fabric.endpoints.write().unwrap();
        if eps.get(&self.ep.addr).is_some_and(|e| Arc::ptr_eq(e, &self.ep)) {
            eps.remove(&self.ep.addr);
        }
        drop(eps);
        self.ep.regions.write().unwrap().clear();
        self.ep.recvs.lock().unwrap().clear();
    }
}

impl Drop for SimDomain {
    fn drop(&mut self) {
        self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{RemoteSlice, SrcSlice};

    fn pair(cfg: FaultConfig) -> (Arc<SimFabric>, Box<dyn Domain>, Box<dyn Domain>) {
        let f = SimFabric::with_trace(cfg, 1, Arc::new(Trace::new()));
        let a = f.open_group(1).unwrap().pop().unwrap();
        let b = f.open_group(1).unwrap().pop().unwrap();
        (f, a, b)
    }

    fn write(
        src: &Arc<DeviceBuffer>,
        off: usize,
        len: usize,
        peer: &NetAddr,
        addr: u64,
        rkey: u64,
        imm: Option<u32>,
        id: u64,
    ) -> WorkRequest {
        WorkRequest {
            wr_id: id,
            transfer_id: id,
            op: WrOp::Write { src: SrcSlice { buf: src.clone(), offset: off, len }, dst: RemoteSlice { peer: peer.clone(), addr, rkey } },
            imm,
            issued_at: 0,
        }
    }

    fn drain(d: &mut Box<dyn Domain>) -> Vec<CompletionEvent> {
        let mut v = Vec::new();
        while d.poll(64, &mut v) > 0 {}
        v
    }

    #[test]
    fn fragment_counts() {
        let (f, mut a, mut b) = pair(FaultConfig { mtu: Some(4096), ..Default::default() });
        let dst = DeviceBuffer::new(10 * 1024);
        let rkey = b.register(dst.clone(), 0, dst.len(), 0).unwrap();
        let src = DeviceBuffer::from_bytes(&[7u8; 10 * 1024]);
        let peer = b.addr().clone();
        a.post(write(&src, 0, 10 * 1024, &peer, 0, rkey, Some(1), 1)).unwrap();
        a.post(write(&src, 0, 4096, &peer, 0, rkey, Some(2), 2)).unwrap();
        drain(&mut a);
        let applied: Vec<u64> = f
            .trace()
            .unwrap()
            .snapshot()
            .into_iter()
            .filter_map(|e| match e.kind {
                TraceKind::WriteApplied { len, .. } => Some(len),
                _ => None,
            })
            .collect();
        assert_eq!(applied, vec![4096, 4096, 2048, 4096]);
        assert_eq!(drain(&mut b).len(), 2);
    }

    #[test]
    fn imm_only_write_changes_nothing() {
        let (_f, mut a, mut b) = pair(FaultConfig::default());
        let dst = DeviceBuffer::from_bytes(&[3u8; 64]);
        let rkey = b.register(dst.clone(), 0, 64, 1000).unwrap();
        let src = DeviceBuffer::new(0);
        let peer = b.addr().clone();
        a.post(write(&src, 0, 0, &peer, 1000, rkey, Some(9), 1)).unwrap();
        let ev = drain(&mut a);
        assert!(matches!(ev[..], [CompletionEvent::SendDone { result: Ok(()), .. }]));
        let ev = drain(&mut b);
        assert!(matches!(ev[..], [CompletionEvent::ImmReceived { imm: 9, .. }]));
        assert_eq!(dst.to_vec(), vec![3u8; 64]);
    }

    #[test]
    fn zero_length_write_needs_imm() {
        let (_f, mut a, b) = pair(FaultConfig::default());
        let src = DeviceBuffer::new(0);
        let peer = b.addr().clone();
        assert!(matches!(a.post(write(&src, 0, 0, &peer, 0, 1, None, 1)), Err(PostError::Invalid(_))));
    }

    #[test]
    fn unknown_rkey_fails_at_sender() {
        let (_f, mut a, mut b) = pair(FaultConfig::default());
        let src = DeviceBuffer::new(8);
        let peer = b.addr().clone();
        a.post(write(&src, 0, 8, &peer, 0, 42, Some(1), 1)).unwrap();
        let ev = drain(&mut a);
        assert!(matches!(ev[..], [CompletionEvent::SendDone { result: Err(TransferError::Delivery(_)), .. }]));
        assert!(drain(&mut b).is_empty());
    }

    #[test]
    fn no_traffic_polls_empty() {
        let (_f, mut a, _b) = pair(FaultConfig::default());
        assert!(drain(&mut a).is_empty());
    }

    #[test]
    fn reverse_reorder_keeps_imm_after_payload() {
        let cfg = FaultConfig { mtu: Some(4096), reorder: Reorder::Reverse, ..Default::default() };
        let (f, mut a, mut b) = pair(cfg);
        let dst = DeviceBuffer::new(1 << 16);
        let rkey = b.register(dst.clone(), 0, dst.len(), 0).unwrap();
        let src = DeviceBuffer::from_bytes(&(0..1 << 16).map(|i| (i % 251) as u8).collect::<Vec<_>>());
        let peer = b.addr().clone();
        a.post(write(&src, 0, 1 << 16, &peer, 0, rkey, Some(5), 1)).unwrap();
        drain(&mut a);
        let evs = f.trace().unwrap().snapshot();
        let imm_pos = evs.iter().position(|e| matches!(e.kind, TraceKind::ImmDelivered { .. })).unwrap();
        let bytes: u64 = evs[..imm_pos]
            .iter()
            .filter_map(|e| match e.kind {
                TraceKind::WriteApplied { len, .. } => Some(len),
                _ => None,
            })
            .sum();
        assert_eq!(bytes, 1 << 16);
        assert!(!evs[imm_pos..].iter().any(|e| matches!(e.kind, TraceKind::WriteApplied { .. })));
        // First applied fragment is the last one of the payload.
        assert!(matches!(evs[0].kind, TraceKind::WriteApplied { addr: 61440, .. }));
        assert_eq!(dst.to_vec(), src.to_vec());
        assert_eq!(drain(&mut b).len(), 1);
    }

    #[test]
    fn messages_need_posted_buffers() {
        let (_f, mut a, mut b) = pair(FaultConfig::default());
        let peer = b.addr().clone();
        let send = |id| WorkRequest {
            wr_id: id,
            transfer_id: id,
            op: WrOp::Send { peer: peer.clone(), payload: Arc::from(&b"hello"[..]) },
            imm: None,
            issued_at: 0,
        };
        a.post(send(1)).unwrap();
        assert!(matches!(drain(&mut a)[..], [CompletionEvent::SendDone { result: Err(_), .. }]));
        b.post(WorkRequest { wr_id: 0, transfer_id: 0, op: WrOp::Recv { buf: DeviceBuffer::new(64) }, imm: None, issued_at: 0 }).unwrap();
        a.post(send(2)).unwrap();
        assert!(matches!(drain(&mut a)[..], [CompletionEvent::SendDone { result: Ok(()), .. }]));
        match &drain(&mut b)[..] {
            [CompletionEvent::MsgReceived { buf, len: 5, .. }] => assert_eq!(buf.read_vec(0, 5), b"hello"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rate_cap_spaces_departures() {
        let cfg = FaultConfig {
            rail_bytes_per_sec: Some(1_000_000_000),
            latency_min_ns: 1000,
            latency_max_ns: 1000,
            wr_overhead_ns: 0,
            ..Default::default()
        };
        let (_f, mut a, b) = pair(cfg);
        let dst = DeviceBuffer::new(2000);
        let mut b = b;
        let rkey = b.register(dst, 0, 2000, 0).unwrap();
        let src = DeviceBuffer::new(1000);
        let peer = b.addr().clone();
        a.post(write(&src, 0, 1000, &peer, 0, rkey, None, 1)).unwrap();
        a.post(write(&src, 0, 1000, &peer, 1000, rkey, None, 2)).unwrap();
        let times: Vec<Nanos> = drain(&mut a)
            .into_iter()
            .map(|e| match e {
                CompletionEvent::SendDone { at, .. } => at,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(times, vec![3000, 4000]);
    }

    #[test]
    fn killed_node_is_unreachable() {
        let (f, mut a, mut b) = pair(FaultConfig::default());
        let dst = DeviceBuffer::new(8);
        let rkey = b.register(dst, 0, 8, 0).unwrap();
        let peer = b.addr().clone();
        f.kill(peer.as_sim().unwrap().0);
        a.post(write(&DeviceBuffer::new(8), 0, 8, &peer, 0, rkey, None, 1)).unwrap();
        assert!(matches!(drain(&mut a)[..], [CompletionEvent::SendDone { result: Err(_), .. }]));
    }
}
