//! One MoE rank: the compute side (the calls below) and a proxy thread that
//! issues the network writes when the compute side bumps its progress word.

use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{select, unbounded, Receiver, Sender};
use serde::Serialize;

use super::layout::{compute_layout, count_routes, DispatchLayout, RouteMatrix};
use super::shm::{ShmNode, ShmPeer};
use super::{MoeError, RoutingSpec};
use crate::engine::WatchWord;
use crate::mem::DeviceBuffer;
use crate::types::{Device, DoneFlag, MrDesc, MrHandle, OnDone, PeerGroupHandle};
use crate::vclock::{self, Nanos};
use crate::TransferEngine;

const ROUTE: u32 = 0;
const TOKENS: u32 = 1;
const COMBINE: u32 = 2;
const BARRIER: u32 = 3;

/// Rows of one local expert inside [`Packed::data`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertGroup {
    pub expert: u32,
    pub start: usize,
    pub rows: usize,
    /// `rows` rounded up to the padding multiple.
    pub padded: usize,
}

/// Received tokens grouped by local expert, each group padded, ready for a
/// grouped GEMM.
#[derive(Debug, Clone)]
pub struct Packed {
    pub token_bytes: usize,
    pub groups: Vec<ExpertGroup>,
    pub data: Vec<u8>,
    /// `(source rank, index in that source's run)` of every row; `None`
    /// for padding.
    pub origins: Vec<Option<(u32, u32)>>,
}

impl Packed {
    pub fn rows(&self) -> usize {
        self.origins.len()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.token_bytes..(i + 1) * self.token_bytes]
    }
}

/// Model-time duration of each call of the last step.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PhaseTimes {
    pub dispatch_send: Nanos,
    pub dispatch_recv: Nanos,
    pub combine_send: Nanos,
    pub combine_recv: Nanos,
    /// From the start of dispatch_send to the end of dispatch_recv.
    pub dispatch: Nanos,
    /// From the start of combine_send to the end of combine_recv.
    pub combine: Nanos,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MoeStats {
    pub steps: u64,
    /// Highest contiguous-buffer slot (exclusive) any of this rank's
    /// writes targeted.
    pub max_slot: usize,
    pub network_writes: u64,
    pub shm_copies: u64,
}

struct Peers {
    descs: Vec<MrDesc>,
    inter: Vec<usize>,
    intra: Vec<usize>,
    group: Option<PeerGroupHandle>,
}

struct Plan {
    row: Vec<u32>,
    route_flags: Vec<(usize, Arc<DoneFlag>)>,
}

struct ProxyDone {
    matrix: RouteMatrix,
    writes: Vec<Arc<DoneFlag>>,
    vt: Nanos,
}

struct Shared {
    engine: TransferEngine,
    spec: RoutingSpec,
    rank: usize,
    node: Arc<ShmNode>,
    me: Arc<ShmPeer>,
    send: Arc<DeviceBuffer>,
    send_h: MrHandle,
    recv_h: MrHandle,
    peers: Mutex<Option<Arc<Peers>>>,
    plan: Mutex<Option<Plan>>,
    stats: Mutex<MoeStats>,
}

/// Byte offsets shared by every rank.
#[derive(Clone, Copy)]
struct Geometry {
    tb: usize,
    ob: usize,
    /// Route row bytes.
    header: usize,
    /// Per-destination stride of the dispatch send area.
    dslot: usize,
    /// Per-source private slot in the receive buffer.
    pslot: usize,
    /// Per-source shared-memory slot.
    sslot: usize,
    contiguous: usize,
    combine: usize,
    recv_len: usize,
    send_len: usize,
}

impl Geometry {
    fn new(s: &RoutingSpec) -> Self {
        let tb = s.token_bytes;
        let ob = s.dim * 4;
        let header = 4 * s.experts;
        let dslot = header + s.max_per_dest() * tb;
        let pslot = header + s.private.min(s.max_per_dest()) * tb;
        let sslot = dslot;
        let contiguous = s.ranks * pslot;
        let combine = contiguous + s.capacity() * tb;
        let recv_len = combine + s.tokens * s.topk * ob;
        let send_len = (s.ranks * dslot).max(s.ranks * s.max_per_dest() * ob);
        Self { tb, ob, header, dslot, pslot, sslot, contiguous, combine, recv_len, send_len }
    }
}

struct StepState {
    t0: Nanos,
    /// `(dest, index in my run for dest)` of every (token, route).
    pos: Vec<Vec<(usize, usize)>>,
    n_to: Vec<u32>,
    routed: usize,
    matrix: Option<RouteMatrix>,
    layout: Option<DispatchLayout>,
    writes: Vec<Arc<DoneFlag>>,
    combine_t0: Nanos,
}

pub struct MoeRank {
    shared: Arc<Shared>,
    geo: Geometry,
    word: Arc<WatchWord>,
    done_rx: Receiver<Result<ProxyDone, MoeError>>,
    proxy: Option<JoinHandle<()>>,
    /// Dropped to stop the proxy.
    stop: Option<Sender<()>>,
    recv_desc: MrDesc,
    step: u64,
    clock: Nanos,
    state: Option<StepState>,
    times: PhaseTimes,
}

fn imm(spec: &RoutingSpec, class: u32, rank: usize) -> u32 {
    spec.imm_base + class * 256 + rank as u32
}

fn wait_flags(flags: &[(usize, Arc<DoneFlag>)], timeout: Duration, phase: &'static str) -> Result<(), MoeError> {
    let deadline = Instant::now() + timeout;
    for (_, f) in flags {
        match f.wait_timeout(deadline.saturating_duration_since(Instant::now())) {
            Some(Ok(())) => vclock::observe(f.completed_at()),
            Some(Err(e)) => return Err(e.into()),
            None => {
                let missing = flags.iter().filter(|(_, f)| !f.is_set()).map(|(s, _)| *s).collect();
                return Err(MoeError::Timeout { phase, missing });
            }
        }
    }
    Ok(())
}

fn wait_all(flags: &[Arc<DoneFlag>], timeout: Duration, phase: &'static str) -> Result<(), MoeError> {
    let tagged: Vec<(usize, Arc<DoneFlag>)> = flags.iter().cloned().enumerate().collect();
    wait_flags(&tagged, timeout, phase)
}

impl Shared {
    fn mark(&self, label: &str, value: u64) {
        if let Some(t) = self.engine.trace() {
            t.mark(self.engine.name(), label, value);
        }
    }

    fn peers(&self) -> Result<Arc<Peers>, MoeError> {
        self.peers.lock().unwrap().clone().ok_or(MoeError::Sequence("connect before dispatch"))
    }

    fn arm(&self, class: u32, sources: &[usize]) -> Result<Vec<(usize, Arc<DoneFlag>)>, MoeError> {
        sources
            .iter()
            .map(|&s| {
                let (od, f) = OnDone::flag();
                self.engine.expect_imm_count(imm(&self.spec, class, s), 1, od)?;
                Ok((s, f))
            })
            .collect()
    }

    fn shm_copy(&self, src: &DeviceBuffer, src_off: usize, dst: &DeviceBuffer, dst_off: usize, len: usize) {
        src.copy_to(src_off, dst, dst_off, len);
        let ns = len as u128 * 1_000_000_000 / self.spec.shm_bytes_per_sec.max(1) as u128;
        vclock::advance(ns as Nanos);
        self.stats.lock().unwrap().shm_copies += 1;
    }

    fn write(&self, len: usize, class: u32, src_off: usize, dst: &MrDesc, dst_off: usize) -> Result<Arc<DoneFlag>, MoeError> {
        let (od, f) = OnDone::flag();
        let imm = imm(&self.spec, class, self.rank);
        self.engine.submit_single_write(len as u64, Some(imm), (self.send_h, src_off as u64), (dst, dst_off as u64), od)?;
        self.stats.lock().unwrap().network_writes += 1;
        Ok(f)
    }

    /// The speculative round, route collection, then the contiguous round.
    fn proxy_step(&self, step: u64, geo: &Geometry) -> Result<ProxyDone, MoeError> {
        let spec = &self.spec;
        let peers = self.peers()?;
        let plan = self.plan.lock().unwrap().take().ok_or(MoeError::Sequence("progress without a plan"))?;
        let mut n_to = vec![0u32; spec.ranks];
        let epr = spec.experts_per_rank();
        for (d, n) in n_to.iter_mut().enumerate() {
            *n = plan.row[d * epr..(d + 1) * epr].iter().sum();
        }
        let mut writes = Vec::new();
        for &d in &peers.inter {
            let p = (n_to[d] as usize).min(spec.private);
            writes.push(self.write(geo.header + p * geo.tb, ROUTE, d * geo.dslot, &peers.descs[d], self.rank * geo.pslot)?);
        }
        wait_flags(&plan.route_flags, spec.timeout, "route exchange")?;
        let target = (step + 1) * peers.intra.len() as u64;
        if !self.me.dispatch.wait(target, spec.timeout) {
            return Err(MoeError::Timeout { phase: "route exchange (node)", missing: peers.intra.clone() });
        }
        let mut matrix = RouteMatrix::new(spec.ranks, spec.experts);
        let mut row = vec![0u8; geo.header];
        for s in 0..spec.ranks {
            if s == self.rank {
                matrix.set_row(s, &plan.row);
                continue;
            }
            if peers.inter.contains(&s) {
                self.me.recv.read(s * geo.pslot, &mut row);
            } else {
                self.me.slots.read(s * geo.sslot, &mut row);
            }
            let counts: Vec<u32> = row.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            matrix.set_row(s, &counts);
        }
        for &d in &peers.inter {
            let layout = compute_layout(spec, &matrix, d)?;
            let (start, n) = layout.source_run(self.rank);
            let p = layout.private[self.rank];
            let end = (start + n) as usize;
            if end > spec.capacity() {
                return Err(MoeError::Capacity { need: end, capacity: spec.capacity() });
            }
            {
                let mut st = self.stats.lock().unwrap();
                st.max_slot = st.max_slot.max(end);
            }
            if n == p {
                // Everything went speculatively; the destination does not wait.
                continue;
            }
            let len = (n - p) as usize * geo.tb;
            let src = d * geo.dslot + geo.header + p as usize * geo.tb;
            let dst = geo.contiguous + (start + p) as usize * geo.tb;
            writes.push(self.write(len, TOKENS, src, &peers.descs[d], dst)?);
        }
        Ok(ProxyDone { matrix, writes, vt: vclock::now() })
    }
}

impl MoeRank {
    /// Registers this rank's buffers on `engine` and attaches them to its
    /// node. Call [`MoeRank::connect`] with every rank's descriptor before
    /// the first step.
    pub fn new(engine: TransferEngine, spec: RoutingSpec, rank: usize, node: Arc<ShmNode>) -> Result<Self, MoeError> {
        spec.validate()?;
        if rank >= spec.ranks {
            return Err(MoeError::Config(format!("rank {rank} of {}", spec.ranks)));
        }
        let geo = Geometry::new(&spec);
        let send = DeviceBuffer::new(geo.send_len);
        let recv = DeviceBuffer::new(geo.recv_len);
        let slots = DeviceBuffer::new(spec.ranks * geo.sslot);
        let (send_h, _) = engine.reg_mr(&send, Device::Gpu(0))?;
        let (recv_h, recv_desc) = engine.reg_mr(&recv, Device::Gpu(0))?;
        let me = node.attach(rank, recv, slots);
        let shared = Arc::new(Shared {
            engine: engine.clone(),
            spec,
            rank,
            node,
            me,
            send,
            send_h,
            recv_h,
            peers: Mutex::new(None),
            plan: Mutex::new(None),
            stats: Mutex::new(MoeStats::default()),
        });
        let (step_tx, step_rx) = unbounded::<(u64, Nanos)>();
        let (done_tx, done_rx) = unbounded();
        let (stop_tx, stop_rx) = unbounded::<()>();
        let word = engine.alloc_uvm_watcher(move |_, new| {
            let _ = step_tx.send((new, vclock::now()));
        });
        let proxy = {
            let shared = shared.clone();
            std::thread::Builder::new()
                .name(format!("{}-moe-proxy", engine.name()))
                .spawn(move || proxy_loop(shared, geo, step_rx, stop_rx, done_tx))
                .expect("spawn proxy")
        };
        Ok(Self {
            shared,
            geo,
            word,
            done_rx,
            proxy: Some(proxy),
            stop: Some(stop_tx),
            recv_desc,
            step: 0,
            clock: 0,
            state: None,
            times: PhaseTimes::default(),
        })
    }

    pub fn desc(&self) -> &MrDesc {
        &self.recv_desc
    }

    pub fn rank(&self) -> usize {
        self.shared.rank
    }

    pub fn spec(&self) -> &RoutingSpec {
        &self.shared.spec
    }

    pub fn stats(&self) -> MoeStats {
        self.shared.stats.lock().unwrap().clone()
    }

    /// Model time at which this rank's last call returned.
    pub fn clock(&self) -> Nanos {
        self.clock
    }

    /// Moves the rank's model clock to at least `t`; benchmarks use it to
    /// start every rank's step at the same instant.
    pub fn align_clock(&mut self, t: Nanos) {
        self.clock = self.clock.max(t);
    }

    pub fn times(&self) -> PhaseTimes {
        self.times
    }

    /// Address range of the contiguous receive buffer.
    pub fn contiguous_range(&self) -> (u64, u64) {
        let lo = self.recv_desc.base + self.geo.contiguous as u64;
        (lo, lo + (self.shared.spec.capacity() * self.geo.tb) as u64)
    }

    /// Address range of the private slots and the contiguous buffer, the
    /// part of the receive region dispatch writes into.
    pub fn dispatch_area(&self) -> (u64, u64) {
        (self.recv_desc.base, self.recv_desc.base + self.geo.combine as u64)
    }

    /// `descs[r]` is rank `r`'s receive descriptor.
    pub fn connect(&mut self, descs: &[MrDesc]) -> Result<(), MoeError> {
        let spec = &self.shared.spec;
        if descs.len() != spec.ranks {
            return Err(MoeError::Config(format!("{} descriptors for {} ranks", descs.len(), spec.ranks)));
        }
        let mine = spec.node_of(self.shared.rank);
        let inter: Vec<usize> = (0..spec.ranks).filter(|&r| spec.node_of(r) != mine).collect();
        let intra: Vec<usize> = (0..spec.ranks).filter(|&r| spec.node_of(r) == mine && r != self.shared.rank).collect();
        for &r in &intra {
            if self.shared.node.peer(r).is_none() {
                return Err(MoeError::Config(format!("rank {r} is not attached to this node")));
            }
        }
        let group = if inter.is_empty() {
            None
        } else {
            Some(self.shared.engine.add_peer_group(inter.iter().map(|&r| descs[r].main_addr().clone()).collect()))
        };
        *self.shared.peers.lock().unwrap() = Some(Arc::new(Peers { descs: descs.to_vec(), inter, intra, group }));
        Ok(())
    }

    fn enter(&self) -> Nanos {
        vclock::observe(self.clock);
        vclock::now()
    }

    fn leave(&mut self) {
        self.clock = self.clock.max(vclock::now());
    }

    /// Sends `tokens` (one `token_bytes` row per token) to the experts in
    /// `routes`.
    pub fn dispatch_send(&mut self, tokens: &[u8], routes: &[Vec<u32>]) -> Result<(), MoeError> {
        if self.state.is_some() {
            return Err(MoeError::Sequence("dispatch_send while a step is in progress"));
        }
        let t0 = self.enter();
        let sh = self.shared.clone();
        let spec = &sh.spec;
        let geo = self.geo;
        if tokens.len() != routes.len() * geo.tb {
            return Err(MoeError::Routes(format!("{} token bytes for {} routes of {} bytes", tokens.len(), routes.len(), geo.tb)));
        }
        let row = count_routes(spec, routes)?;
        let peers = sh.peers()?;
        let epr = spec.experts_per_rank();
        // Copy into the send buffer: per destination the route row, then
        // tokens ordered by (local expert, token).
        let mut pos = vec![vec![(0usize, 0usize); spec.topk]; routes.len()];
        let mut n_to = vec![0u32; spec.ranks];
        let header: Vec<u8> = row.iter().flat_map(|c| c.to_le_bytes()).collect();
        for (d, n) in n_to.iter_mut().enumerate() {
            let base = d * geo.dslot;
            sh.send.write(base, &header);
            let mut k = 0;
            for le in 0..epr {
                let e = (d * epr + le) as u32;
                for (t, r) in routes.iter().enumerate() {
                    if let Some(j) = r.iter().position(|&x| x == e) {
                        sh.send.write(base + geo.header + k * geo.tb, &tokens[t * geo.tb..(t + 1) * geo.tb]);
                        pos[t][j] = (d, k);
                        k += 1;
                    }
                }
            }
            *n = k as u32;
        }
        let route_flags = sh.arm(ROUTE, &peers.inter)?;
        *sh.plan.lock().unwrap() = Some(Plan { row, route_flags });
        // Host first, then the intra-node copies.
        sh.mark("host_signal", self.step);
        self.word.fetch_add(1);
        sh.mark("shm_copy", self.step);
        let mut node = peers.intra.clone();
        node.push(sh.rank);
        for d in node {
            let peer = if d == sh.rank { sh.me.clone() } else { sh.node.peer(d).expect("attached") };
            let len = geo.header + n_to[d] as usize * geo.tb;
            sh.shm_copy(&sh.send, d * geo.dslot, &peer.slots, sh.rank * geo.sslot, len);
            if d != sh.rank {
                peer.dispatch.bump();
            }
        }
        self.times.dispatch_send = vclock::now() - t0;
        self.state = Some(StepState { t0, pos, n_to, routed: routes.len(), matrix: None, layout: None, writes: vec![], combine_t0: 0 });
        self.leave();
        Ok(())
    }

    /// Waits for every token routed to this rank's experts and packs them.
    pub fn dispatch_recv(&mut self) -> Result<Packed, MoeError> {
        let t_in = self.enter();
        let sh = self.shared.clone();
        let spec = &sh.spec;
        let geo = self.geo;
        let st = self.state.as_mut().ok_or(MoeError::Sequence("dispatch_recv without dispatch_send"))?;
        if st.matrix.is_some() {
            return Err(MoeError::Sequence("dispatch_recv called twice"));
        }
        let done = match self.done_rx.recv_timeout(spec.timeout) {
            Ok(r) => r?,
            Err(_) => return Err(MoeError::Timeout { phase: "proxy", missing: vec![] }),
        };
        vclock::observe(done.vt);
        let peers = sh.peers()?;
        let layout = compute_layout(spec, &done.matrix, sh.rank)?;
        // Only sources that overflowed their private slot send a second write.
        let overflow: Vec<usize> = peers.inter.iter().copied().filter(|&s| layout.source_run(s).1 > layout.private[s]).collect();
        wait_flags(&sh.arm(TOKENS, &overflow)?, spec.timeout, "token receive")?;
        let epr = spec.experts_per_rank();
        let mut groups = Vec::with_capacity(epr);
        let mut data = Vec::new();
        let mut origins = Vec::new();
        let mut tok = vec![0u8; geo.tb];
        for le in 0..epr {
            let start = origins.len();
            for s in 0..spec.ranks {
                let (run, _) = layout.source_run(s);
                let (first, len) = layout.ranges[s][le];
                for j in 0..len {
                    let k = (first - run + j) as usize;
                    if !peers.inter.contains(&s) {
                        sh.me.slots.read(s * geo.sslot + geo.header + k * geo.tb, &mut tok);
                    } else if k < layout.private[s] as usize {
                        sh.me.recv.read(s * geo.pslot + geo.header + k * geo.tb, &mut tok);
                    } else {
                        sh.me.recv.read(geo.contiguous + (first + j) as usize * geo.tb, &mut tok);
                    }
                    data.extend_from_slice(&tok);
                    origins.push(Some((s as u32, k as u32)));
                }
            }
            let rows = origins.len() - start;
            let padded = rows.div_ceil(spec.pad) * spec.pad;
            data.resize((start + padded) * geo.tb, 0);
            origins.resize(start + padded, None);
            groups.push(ExpertGroup { expert: (sh.rank * epr + le) as u32, start, rows, padded });
        }
        st.matrix = Some(done.matrix);
        st.layout = Some(layout);
        st.writes = done.writes;
        let now = vclock::now();
        self.times.dispatch_recv = now - t_in;
        self.times.dispatch = now - st.t0;
        self.leave();
        Ok(Packed { token_bytes: geo.tb, groups, data, origins })
    }

    /// Returns expert outputs to their origins. `outputs` holds `dim` f32
    /// values for every row of `packed`, padding rows included.
    pub fn combine_send(&mut self, packed: &Packed, outputs: &[f32]) -> Result<(), MoeError> {
        let t0 = self.enter();
        let sh = self.shared.clone();
        let spec = &sh.spec;
        let geo = self.geo;
        let st = self.state.as_mut().ok_or(MoeError::Sequence("combine_send without dispatch"))?;
        let matrix = st.matrix.as_ref().ok_or(MoeError::Sequence("combine_send before dispatch_recv"))?;
        if outputs.len() != packed.rows() * spec.dim {
            return Err(MoeError::Routes(format!("{} outputs for {} rows of {}", outputs.len(), packed.rows(), spec.dim)));
        }
        let peers = sh.peers()?;
        // The send buffer still backs this step's dispatch writes: wait for
        // them (network) and for the node copies, which are synchronous.
        wait_all(&st.writes, spec.timeout, "dispatch write completion")?;
        sh.mark("rdma_fence", self.step);
        sh.mark("nvlink_fence", self.step);
        st.combine_t0 = t0;
        let counts: Vec<usize> = (0..spec.ranks).map(|s| matrix.to_rank(spec, s, sh.rank) as usize).collect();
        let mut offs = vec![0usize; spec.ranks];
        for s in 1..spec.ranks {
            offs[s] = offs[s - 1] + counts[s - 1] * geo.ob;
        }
        sh.mark("combine_store", self.step);
        let mut bytes = Vec::with_capacity(geo.ob);
        for (i, o) in packed.origins.iter().enumerate() {
            if let Some((s, k)) = *o {
                bytes.clear();
                bytes.extend(outputs[i * spec.dim..(i + 1) * spec.dim].iter().flat_map(|v| v.to_le_bytes()));
                sh.send.write(offs[s as usize] + k as usize * geo.ob, &bytes);
            }
        }
        let mut writes = Vec::new();
        for s in 0..spec.ranks {
            // Where my outputs go in the origin's combine area.
            let before: usize = (0..sh.rank).map(|d| matrix.to_rank(spec, s, d) as usize).sum();
            let dst = geo.combine + before * geo.ob;
            let len = counts[s] * geo.ob;
            if peers.inter.contains(&s) {
                writes.push(sh.write(len, COMBINE, offs[s], &peers.descs[s], dst)?);
            } else {
                let peer = if s == sh.rank { sh.me.clone() } else { sh.node.peer(s).expect("attached") };
                sh.shm_copy(&sh.send, offs[s], &peer.recv, dst, len);
                if s != sh.rank {
                    peer.combine.bump();
                }
            }
        }
        st.writes = writes;
        self.times.combine_send = vclock::now() - t0;
        self.leave();
        Ok(())
    }

    /// Weighted sum of the returned expert outputs per token, accumulated
    /// in f32 in route order; `weights[t * topk + r]` weighs route `r` of
    /// token `t`. Ends the step with the closing barriers.
    pub fn combine_recv(&mut self, weights: &[f32]) -> Result<Vec<f32>, MoeError> {
        let t_in = self.enter();
        let sh = self.shared.clone();
        let spec = &sh.spec;
        let geo = self.geo;
        match &self.state {
            None => return Err(MoeError::Sequence("combine_recv without dispatch")),
            Some(st) if st.matrix.is_none() => return Err(MoeError::Sequence("combine_recv before dispatch_recv")),
            Some(st) if weights.len() != st.routed * spec.topk => {
                return Err(MoeError::Routes(format!("{} weights for {} routed tokens", weights.len(), st.routed)))
            }
            _ => {}
        }
        let st = self.state.take().unwrap();
        let peers = sh.peers()?;
        let flags = sh.arm(COMBINE, &peers.inter)?;
        wait_flags(&flags, spec.timeout, "combine receive")?;
        let target = (self.step + 1) * peers.intra.len() as u64;
        if !sh.me.combine.wait(target, spec.timeout) {
            return Err(MoeError::Timeout { phase: "combine receive (node)", missing: peers.intra.clone() });
        }
        let mut base = vec![0usize; spec.ranks];
        for d in 1..spec.ranks {
            base[d] = base[d - 1] + st.n_to[d - 1] as usize;
        }
        let mut out = vec![0f32; st.routed * spec.dim];
        let mut y = vec![0u8; geo.ob];
        for (t, routes) in st.pos.iter().enumerate() {
            let acc = &mut out[t * spec.dim..(t + 1) * spec.dim];
            for (r, &(d, k)) in routes.iter().enumerate() {
                sh.me.recv.read(geo.combine + (base[d] + k) * geo.ob, &mut y);
                let w = weights[t * spec.topk + r];
                for (a, c) in acc.iter_mut().zip(y.chunks_exact(4)) {
                    *a += w * f32::from_le_bytes(c.try_into().unwrap());
                }
            }
        }
        // Closing barriers: nobody reuses receive buffers before every
        // rank is done reading this step.
        wait_all(&st.writes, spec.timeout, "combine write completion")?;
        let bflags = sh.arm(BARRIER, &peers.inter)?;
        if let Some(g) = peers.group {
            let dsts: Vec<MrDesc> = peers.inter.iter().map(|&r| peers.descs[r].clone()).collect();
            sh.engine.submit_barrier(g, OnDone::Ignore, imm(spec, BARRIER, sh.rank), &dsts)?;
        }
        for &r in &peers.intra {
            sh.node.peer(r).expect("attached").barrier.bump();
        }
        wait_flags(&bflags, spec.timeout, "closing barrier")?;
        if !sh.me.barrier.wait(target, spec.timeout) {
            return Err(MoeError::Timeout { phase: "closing barrier (node)", missing: peers.intra.clone() });
        }
        sh.mark("step_done", self.step);
        let now = vclock::now();
        self.times.combine_recv = now - t_in;
        self.times.combine = now - st.combine_t0;
        self.step += 1;
        sh.stats.lock().unwrap().steps += 1;
        self.leave();
        Ok(out)
    }
}

fn proxy_loop(
    shared: Arc<Shared>,
    geo: Geometry,
    steps: Receiver<(u64, Nanos)>,
    stop: Receiver<()>,
    done: Sender<Result<ProxyDone, MoeError>>,
) {
    let mut handled = 0u64;
    loop {
        select! {
            recv(steps) -> m => {
                let Ok((word, vt)) = m else { return };
                vclock::observe(vt);
                // The word counts steps; one bump per step.
                while handled < word {
                    let r = shared.proxy_step(handled, &geo);
                    handled += 1;
                    if done.send(r).is_err() {
                        return;
                    }
                }
            }
            recv(stop) -> _ => return,
        }
    }
}

impl Drop for MoeRank {
    fn drop(&mut self) {
        self.stop = None;
        if let Some(h) = self.proxy.take() {
            let _ = h.join();
        }
        let _ = self.shared.engine.dereg_mr(self.shared.send_h);
        let _ = self.shared.engine.dereg_mr(self.shared.recv_h);
    }
}
