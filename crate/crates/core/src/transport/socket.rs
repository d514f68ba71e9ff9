//! UDP transport with per-fragment acknowledgement and retransmission.
//!
//! Each rail is one UDP socket plus a receive thread. Writes are cut into
//! datagrams of at most `frag_payload` bytes. The receiver applies each
//! fragment into registered memory, acknowledges it, and remembers which
//! `(sender, wr seq)` pairs it has finished, so retransmitted datagrams never
//! produce a second immediate. Acks also carry a cumulative floor: every
//! sequence number below it is finished. The sender keeps at most `window`
//! unacknowledged fragments in flight and resends any fragment that stays
//! unacknowledged for `rto`.
//!
//! Datagram layout is documented in `docs/wire.md`.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socket2::{Domain as SockDomain, Protocol, Socket, Type};

use super::{CompletionEvent, Domain, Doorbell, PostError, Region, Transport, WorkRequest, WrOp};
use crate::error::TransferError;
use crate::mem::DeviceBuffer;
use crate::trace::{Trace, TraceKind};
use crate::types::NetAddr;
use crate::vclock::wall_nanos;
use crate::wire::{Reader, Wire, WireError, Writer};

pub const MAGIC: u32 = 0x5445_4e47;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PacketKind {
    Write = 1,
    Msg = 2,
    Ack = 3,
    Nak = 4,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub kind: PacketKind,
    pub sender: NetAddr,
    pub seq: u64,
    pub transfer: u64,
    /// Target address of this fragment for writes; cumulative floor for acks.
    pub dst: u64,
    pub rkey: u64,
    pub frag_index: u32,
    pub frag_count: u32,
    pub imm: Option<u32>,
    pub payload: Vec<u8>,
}

impl Wire for Packet {
    fn encode_into(&self, w: &mut Writer) {
        w.u32(MAGIC)
            .u8(self.kind as u8)
            .put(&self.sender)
            .u64(self.seq)
            .u64(self.transfer)
            .u64(self.dst)
            .u64(self.rkey)
            .u32(self.frag_index)
            .u32(self.frag_count)
            .u8(self.imm.is_some() as u8)
            .u32(self.imm.unwrap_or(0))
            .raw(&self.payload);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        if r.u32()? != MAGIC {
            return Err(WireError::Invalid("bad magic"));
        }
        let kind = match r.u8()? {
            1 => PacketKind::Write,
            2 => PacketKind::Msg,
            3 => PacketKind::Ack,
            4 => PacketKind::Nak,
            _ => return Err(WireError::Invalid("unknown packet kind")),
        };
        let sender = r.get()?;
        let seq = r.u64()?;
        let transfer = r.u64()?;
        let dst = r.u64()?;
        let rkey = r.u64()?;
        let frag_index = r.u32()?;
        let frag_count = r.u32()?;
        let imm = match (r.u8()?, r.u32()?) {
            (0, _) => None,
            (1, v) => Some(v),
            _ => return Err(WireError::Invalid("imm flag")),
        };
        if frag_index >= frag_count.max(1) {
            return Err(WireError::Invalid("fragment index out of range"));
        }
        let payload = r.rest().to_vec();
        Ok(Self { kind, sender, seq, transfer, dst, rkey, frag_index, frag_count, imm, payload })
    }
}

#[derive(Debug, Clone)]
pub struct SocketConfig {
    pub ip: IpAddr,
    pub frag_payload: usize,
    pub window: usize,
    pub rto: Duration,
    pub max_wr_size: usize,
    /// Fault injection for tests: probability of dropping / duplicating any
    /// outgoing datagram (data and acks alike).
    pub drop_rate: f64,
    pub dup_rate: f64,
    pub seed: u64,
}

impl Default for SocketConfig {
    fn default() -> Self {
        Self {
            ip: Ipv4Addr::LOCALHOST.into(),
            frag_payload: 60 * 1024,
            window: 32,
            rto: Duration::from_millis(10),
            max_wr_size: 1 << 30,
            drop_rate: 0.0,
            dup_rate: 0.0,
            seed: 0,
        }
    }
}

pub struct UdpTransport {
    cfg: SocketConfig,
    trace: Option<Arc<Trace>>,
}

impl UdpTransport {
    pub fn new(cfg: SocketConfig) -> Arc<Self> {
        Arc::new(Self { cfg, trace: None })
    }

    pub fn with_trace(cfg: SocketConfig, trace: Arc<Trace>) -> Arc<Self> {
        Arc::new(Self { cfg, trace: Some(trace) })
    }

    fn bind(&self) -> io::Result<UdpSocket> {
        let addr = SocketAddr::new(self.cfg.ip, 0);
        let sock = Socket::new(SockDomain::for_address(addr), Type::DGRAM, Some(Protocol::UDP))?;
        // Best effort; the kernel clamps to its maximum.
        let _ = sock.set_recv_buffer_size(4 << 20);
        let _ = sock.set_send_buffer_size(4 << 20);
        sock.bind(&addr.into())?;
        let udp: UdpSocket = sock.into();
        udp.set_read_timeout(Some(Duration::from_millis(20)))?;
        Ok(udp)
    }
}

impl Transport for UdpTransport {
    fn open_group(&self, rails: usize) -> Result<Vec<Box<dyn Domain>>, TransferError> {
        let mut out: Vec<Box<dyn Domain>> = Vec::with_capacity(rails);
        for rail in 0..rails {
            let sock = Arc::new(self.bind().map_err(|e| TransferError::Transport(e.to_string()))?);
            let local = sock.local_addr().map_err(|e| TransferError::Transport(e.to_string()))?;
            let addr = NetAddr::from_socket(local);
            let shared = Arc::new(Shared {
                name: addr.to_string(),
                addr: addr.clone(),
                regions: RwLock::new(HashMap::new()),
                recvs: Mutex::new(VecDeque::new()),
                cq: Mutex::new(VecDeque::new()),
                acks: Mutex::new(VecDeque::new()),
                bell: Mutex::new(None),
                closed: AtomicBool::new(false),
                trace: self.trace.clone(),
            });
            let seed = self.cfg.seed ^ (local.port() as u64) << 16 ^ rail as u64;
            let rx = {
                let (sock, shared, cfg) = (sock.clone(), shared.clone(), self.cfg.clone());
                std::thread::Builder::new()
                    .name(format!("udp-rx-{}", local.port()))
                    .spawn(move || RxLoop::new(sock, shared, cfg, seed).run())
                    .map_err(|e| TransferError::Transport(e.to_string()))?
            };
            out.push(Box::new(SocketDomain {
                cfg: self.cfg.clone(),
                sock,
                shared,
                rx: Some(rx),
                rng: ChaCha8Rng::seed_from_u64(seed.rotate_left(7)),
                next_seq: 1,
                outstanding: BTreeMap::new(),
                inflight: 0,
                local: VecDeque::new(),
                closed: false,
            }));
        }
        Ok(out)
    }

    fn virtual_time(&self) -> bool {
        false
    }
}

struct AckInfo {
    from: NetAddr,
    seq: u64,
    frag: u32,
    floor: u64,
    error: Option<String>,
}

struct Shared {
    addr: NetAddr,
    name: String,
    regions: RwLock<HashMap<u64, Region>>,
    recvs: Mutex<VecDeque<Arc<DeviceBuffer>>>,
    cq: Mutex<VecDeque<CompletionEvent>>,
    acks: Mutex<VecDeque<AckInfo>>,
    bell: Mutex<Option<Doorbell>>,
    closed: AtomicBool,
    trace: Option<Arc<Trace>>,
}

impl Shared {
    fn ring(&self) {
        if let Some(b) = self.bell.lock().unwrap().as_ref() {
            b.ring();
        }
    }

    fn record(&self, kind: TraceKind) {
        if let Some(t) = &self.trace {
            t.record(wall_nanos(), kind);
        }
    }
}

fn send_with_faults(sock: &UdpSocket, rng: &mut ChaCha8Rng, cfg: &SocketConfig, bytes: &[u8], to: SocketAddr) {
    if cfg.drop_rate > 0.0 && rng.gen_bool(cfg.drop_rate) {
        return;
    }
    let copies = if cfg.dup_rate > 0.0 && rng.gen_bool(cfg.dup_rate) { 2 } else { 1 };
    for _ in 0..copies {
        // A full socket buffer behaves like loss; retransmission covers it.
        let _ = sock.send_to(bytes, to);
    }
}

/// Receive-side progress of one partially delivered request.
struct RxPartial {
    got: Vec<bool>,
    missing: u32,
}

/// Finished sequence numbers from one sender.
#[derive(Default)]
struct Finished {
    floor: u64,
    above: BTreeSet<u64>,
    failed: HashMap<u64, String>,
}

impl Finished {
    fn contains(&self, seq: u64) -> bool {
        seq < self.floor || self.above.contains(&seq)
    }

    fn insert(&mut self, seq: u64) {
        self.above.insert(seq);
        while self.above.remove(&self.floor) {
            self.floor += 1;
        }
    }
}

struct RxLoop {
    sock: Arc<UdpSocket>,
    shared: Arc<Shared>,
    cfg: SocketConfig,
    rng: ChaCha8Rng,
    partial: HashMap<(NetAddr, u64), RxPartial>,
    finished: HashMap<NetAddr, Finished>,
}

impl RxLoop {
    fn new(sock: Arc<UdpSocket>, shared: Arc<Shared>, cfg: SocketConfig, seed: u64) -> Self {
        Self { sock, shared, cfg, rng: ChaCha8Rng::seed_from_u64(seed), partial: HashMap::new(), finished: HashMap::new() }
    }

    fn run(mut self) {
        let mut buf = vec![0u8; 65536];
        while !self.shared.closed.load(Ordering::Acquire) {
            let (n, from) = match self.sock.recv_from(&mut buf) {
                Ok(x) => x,
                Err(_) => continue,
            };
            let Ok(pkt) = Packet::decode(&buf[..n]) else {
                log::debug!("{}: dropping malformed datagram from {from}", self.shared.name);
                continue;
            };
            match pkt.kind {
                PacketKind::Ack | PacketKind::Nak => {
                    let error = (pkt.kind == PacketKind::Nak).then(|| String::from_utf8_lossy(&pkt.payload).into_owned());
                    self.shared.acks.lock().unwrap().push_back(AckInfo {
                        from: pkt.sender,
                        seq: pkt.seq,
                        frag: pkt.frag_index,
                        floor: pkt.dst,
                        error,
                    });
                    self.shared.ring();
                }
                PacketKind::Write | PacketKind::Msg => self.on_data(pkt, from),
            }
        }
    }

    fn reply(&mut self, pkt: &Packet, to: SocketAddr, error: Option<&str>) {
        let floor = self.finished.get(&pkt.sender).map_or(0, |f| f.floor);
        let reply = Packet {
            kind: if error.is_some() { PacketKind::Nak } else { PacketKind::Ack },
            sender: self.shared.addr.clone(),
            seq: pkt.seq,
            transfer: pkt.transfer,
            dst: floor,
            rkey: 0,
            frag_index: pkt.frag_index,
            frag_count: pkt.frag_count,
            imm: None,
            payload: error.map(|e| e.as_bytes().to_vec()).unwrap_or_default(),
        };
        send_with_faults(&self.sock, &mut self.rng, &self.cfg, &reply.encode(), to);
    }

    fn finish(&mut self, pkt: &Packet, error: Option<String>) {
        self.partial.remove(&(pkt.sender.clone(), pkt.seq));
        let f = self.finished.entry(pkt.sender.clone()).or_default();
        if let Some(e) = error {
            f.failed.insert(pkt.seq, e);
        }
        f.insert(pkt.seq);
    }

    fn on_data(&mut self, pkt: Packet, from: SocketAddr) {
        if let Some(f) = self.finished.get(&pkt.sender) {
            if f.contains(pkt.seq) {
                let err = f.failed.get(&pkt.seq).cloned();
                self.reply(&pkt, from, err.as_deref());
                return;
            }
        }
        let key = (pkt.sender.clone(), pkt.seq);
        if self.partial.get(&key).is_some_and(|p| p.got[pkt.frag_index as usize]) {
            self.reply(&pkt, from, None);
            return;
        }
        let result = match pkt.kind {
            PacketKind::Write => self.apply_write(&pkt),
            _ => self.apply_msg(&pkt),
        };
        match result {
            Err(e) => {
                self.shared.record(TraceKind::DeliveryError {
                    at: self.shared.name.clone(),
                    from: pkt.sender.to_string(),
                    reason: e.clone(),
                });
                self.finish(&pkt, Some(e.clone()));
                self.reply(&pkt, from, Some(&e));
            }
            Ok(()) => {
                let total = pkt.frag_count.max(1);
                let p = self.partial.entry(key).or_insert_with(|| RxPartial { got: vec![false; total as usize], missing: total });
                p.got[pkt.frag_index as usize] = true;
                p.missing -= 1;
                if p.missing == 0 {
                    self.finish(&pkt, None);
                    if pkt.kind == PacketKind::Write {
                        if let Some(imm) = pkt.imm {
                            self.shared.record(TraceKind::ImmDelivered { at: self.shared.name.clone(), from: pkt.sender.to_string(), imm });
                            self.shared.cq.lock().unwrap().push_back(CompletionEvent::ImmReceived {
                                imm,
                                from: pkt.sender.clone(),
                                at: wall_nanos(),
                            });
                            self.shared.ring();
                        }
                    }
                }
                self.reply(&pkt, from, None);
            }
        }
    }

    fn apply_write(&self, pkt: &Packet) -> Result<(), String> {
        let regions = self.shared.regions.read().unwrap();
        let region = regions.get(&pkt.rkey).ok_or_else(|| format!("unknown rkey {:#x}", pkt.rkey))?;
        let at = region
            .resolve(pkt.dst, pkt.payload.len())
            .ok_or_else(|| format!("write {:#x}+{} outside region", pkt.dst, pkt.payload.len()))?;
        region.buf.write(at, &pkt.payload);
        self.shared.record(TraceKind::WriteApplied {
            at: self.shared.name.clone(),
            from: pkt.sender.to_string(),
            addr: pkt.dst,
            len: pkt.payload.len() as u64,
        });
        Ok(())
    }

    fn apply_msg(&self, pkt: &Packet) -> Result<(), String> {
        let buf = self.shared.recvs.lock().unwrap().pop_front().ok_or("no receive buffer posted")?;
        if pkt.payload.len() > buf.len() {
            self.shared.recvs.lock().unwrap().push_front(buf);
            return Err(format!("message of {} bytes exceeds receive buffer", pkt.payload.len()));
        }
        buf.write(0, &pkt.payload);
        self.shared.record(TraceKind::MsgDelivered {
            at: self.shared.name.clone(),
            from: pkt.sender.to_string(),
            len: pkt.payload.len() as u64,
        });
        self.shared.cq.lock().unwrap().push_back(CompletionEvent::MsgReceived {
            from: pkt.sender.clone(),
            buf,
            len: pkt.payload.len(),
            at: wall_nanos(),
        });
        self.shared.ring();
        Ok(())
    }
}

struct TxWr {
    wr: WorkRequest,
    peer: NetAddr,
    to: SocketAddr,
    total: u32,
    acked: Vec<bool>,
    missing: u32,
    sent: Vec<Option<Instant>>,
    next_unsent: u32,
    error: Option<String>,
}

pub struct SocketDomain {
    cfg: SocketConfig,
    sock: Arc<UdpSocket>,
    shared: Arc<Shared>,
    rx: Option<JoinHandle<()>>,
    rng: ChaCha8Rng,
    next_seq: u64,
    outstanding: BTreeMap<u64, TxWr>,
    inflight: usize,
    local: VecDeque<CompletionEvent>,
    closed: bool,
}

impl SocketDomain {
    fn packet(&self, seq: u64, tx: &TxWr, frag: u32) -> Packet {
        let fp = self.cfg.frag_payload;
        let (kind, dst, rkey, payload) = match &tx.wr.op {
            WrOp::Write { src, dst } => {
                let off = frag as usize * fp;
                let len = fp.min(src.len - off.min(src.len));
                (PacketKind::Write, dst.addr + off as u64, dst.rkey, src.buf.read_vec(src.offset + off, len))
            }
            WrOp::Send { payload, .. } => (PacketKind::Msg, 0, 0, payload.to_vec()),
            WrOp::Recv { .. } => unreachable!(),
        };
        Packet {
            kind,
            sender: self.shared.addr.clone(),
            seq,
            transfer: tx.wr.transfer_id,
            dst,
            rkey,
            frag_index: frag,
            frag_count: tx.total,
            imm: tx.wr.imm,
            payload,
        }
    }

    fn transmit(&mut self, seq: u64, frag: u32) {
        let tx = &self.outstanding[&seq];
        let bytes = self.packet(seq, tx, frag).encode();
        let to = tx.to;
        send_with_faults(&self.sock, &mut self.rng, &self.cfg, &bytes, to);
        self.outstanding.get_mut(&seq).unwrap().sent[frag as usize] = Some(Instant::now());
    }

    /// Sends new fragments while the window allows and resends stale ones.
    fn pump(&mut self) {
        let now = Instant::now();
        let mut resend = Vec::new();
        for (&seq, tx) in &self.outstanding {
            for f in 0..tx.next_unsent {
                if !tx.acked[f as usize] && tx.sent[f as usize].is_some_and(|t| now - t >= self.cfg.rto) {
                    resend.push((seq, f));
                }
            }
        }
        for (seq, f) in resend {
            self.transmit(seq, f);
        }
        let seqs: Vec<u64> = self.outstanding.keys().copied().collect();
        for seq in seqs {
            loop {
                let tx = &self.outstanding[&seq];
                if self.inflight >= self.cfg.window || tx.next_unsent >= tx.total {
                    break;
                }
                let f = tx.next_unsent;
                self.outstanding.get_mut(&seq).unwrap().next_unsent += 1;
                self.inflight += 1;
                self.transmit(seq, f);
            }
            if self.inflight >= self.cfg.window {
                break;
            }
        }
    }

    fn complete(&mut self, seq: u64) {
        if let Some(tx) = self.outstanding.remove(&seq) {
            self.inflight -= tx.sent.iter().zip(&tx.acked).filter(|(s, a)| s.is_some() && !**a).count();
            let result = match tx.error {
                None => Ok(()),
                Some(e) => Err(TransferError::Delivery(e)),
            };
            self.local.push_back(CompletionEvent::SendDone {
                wr_id: tx.wr.wr_id,
                transfer_id: tx.wr.transfer_id,
                result,
                at: wall_nanos(),
            });
        }
    }

    fn on_ack(&mut self, ack: AckInfo) {
        let mut done = false;
        if let Some(tx) = self.outstanding.get_mut(&ack.seq).filter(|tx| tx.peer == ack.from) {
            if let Some(e) = ack.error {
                tx.error = Some(e);
                done = true;
            } else if (ack.frag as usize) < tx.acked.len() && !tx.acked[ack.frag as usize] {
                tx.acked[ack.frag as usize] = true;
                tx.missing -= 1;
                self.inflight -= 1;
                done = tx.missing == 0;
            }
        }
        if done {
            self.complete(ack.seq);
        }
        if ack.floor > 0 {
            let done: Vec<u64> =
                self.outstanding.range(..ack.floor).filter(|(_, tx)| tx.peer == ack.from && tx.error.is_none()).map(|(s, _)| *s).collect();
            for s in done {
                self.complete(s);
            }
        }
    }
}

impl Domain for SocketDomain {
    fn addr(&self) -> &NetAddr {
        &self.shared.addr
    }

    fn max_wr_size(&self) -> usize {
        self.cfg.max_wr_size
    }

    fn register(&mut self, buf: Arc<DeviceBuffer>, offset: usize, len: usize, base: u64) -> Result<u64, TransferError> {
        if offset.checked_add(len).is_none_or(|end| end > buf.len()) {
            return Err(TransferError::Bounds(format!("register {offset}+{len} of {}", buf.len())));
        }
        let mut regions = self.shared.regions.write().unwrap();
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
        self.shared.regions.write().unwrap().remove(&rkey);
    }

    fn post(&mut self, wr: WorkRequest) -> Result<(), PostError> {
        if self.closed {
            return Err(PostError::Invalid("domain closed".into()));
        }
        if let WrOp::Recv { buf } = wr.op {
            self.shared.recvs.lock().unwrap().push_back(buf);
            return Ok(());
        }
        let len = wr.len();
        if len > self.cfg.max_wr_size {
            return Err(PostError::Invalid(format!("{len} bytes exceeds max work request size")));
        }
        let peer = wr.peer().unwrap().clone();
        let Some(to) = peer.as_socket() else {
            return Err(PostError::Invalid(format!("{peer} is not a socket address")));
        };
        let total = match &wr.op {
            WrOp::Write { src, .. } => {
                if src.offset.checked_add(src.len).is_none_or(|end| end > src.buf.len()) {
                    return Err(PostError::Invalid("source slice out of bounds".into()));
                }
                if len == 0 && wr.imm.is_none() {
                    return Err(PostError::Invalid("zero-length write without immediate".into()));
                }
                len.div_ceil(self.cfg.frag_payload).max(1)
            }
            _ => {
                if len > self.cfg.frag_payload {
                    return Err(PostError::Invalid(format!("message of {len} bytes exceeds one datagram")));
                }
                1
            }
        } as u32;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.outstanding.insert(
            seq,
            TxWr {
                wr,
                peer,
                to,
                total,
                acked: vec![false; total as usize],
                missing: total,
                sent: vec![None; total as usize],
                next_unsent: 0,
                error: None,
            },
        );
        self.pump();
        Ok(())
    }

    fn poll(&mut self, max: usize, out: &mut Vec<CompletionEvent>) -> usize {
        let acks: Vec<AckInfo> = self.shared.acks.lock().unwrap().drain(..).collect();
        for a in acks {
            self.on_ack(a);
        }
        if !self.outstanding.is_empty() {
            self.pump();
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
            let mut cq = self.shared.cq.lock().unwrap();
            let n = room.min(cq.len());
            out.extend(cq.drain(..n));
        }
        out.len() - before
    }

    fn has_staged(&self) -> bool {
        !self.outstanding.is_empty()
    }

    fn set_doorbell(&mut self, bell: Doorbell) {
        *self.shared.bell.lock().unwrap() = Some(bell);
    }

    fn close(&mut self) {
        if std::mem::replace(&mut self.closed, true) {
            return;
        }
        self.shared.closed.store(true, Ordering::Release);
        if let Some(h) = self.rx.take() {
            let _ = h.join();
        }
        self.shared.regions.write().unwrap().clear();
        self.shared.recvs.lock().unwrap().clear();
    }
}

impl Drop for SocketDomain {
    fn drop(&mut self) {
        self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{RemoteSlice, SrcSlice};

    #[test]
    fn packet_round_trip() {
        let p = Packet {
            kind: PacketKind::Write,
            sender: NetAddr::from_socket("127.0.0.1:9".parse().unwrap()),
            seq: 3,
            transfer: 4,
            dst: 5,
            rkey: 6,
            frag_index: 1,
            frag_count: 2,
            imm: Some(7),
            payload: vec![1, 2, 3],
        };
        assert_eq!(Packet::decode(&p.encode()).unwrap(), p);
        let mut bad = p.encode();
        bad[0] ^= 1;
        assert!(Packet::decode(&bad).is_err());
    }

    fn run_lossy(drop_rate: f64, dup_rate: f64) {
        let t = UdpTransport::new(SocketConfig { drop_rate, dup_rate, seed: 5, frag_payload: 1024, ..Default::default() });
        let mut a = t.open_group(1).unwrap().pop().unwrap();
        let mut b = t.open_group(1).unwrap().pop().unwrap();
        let dst = DeviceBuffer::new(64 * 1024);
        let rkey = b.register(dst.clone(), 0, dst.len(), 0x1000).unwrap();
        let src = DeviceBuffer::from_bytes(&(0..64 * 1024).map(|i| (i * 7 % 256) as u8).collect::<Vec<_>>());
        for i in 0..16u64 {
            a.post(WorkRequest {
                wr_id: i,
                transfer_id: i,
                op: WrOp::Write {
                    src: SrcSlice { buf: src.clone(), offset: i as usize * 4096, len: 4096 },
                    dst: RemoteSlice { peer: b.addr().clone(), addr: 0x1000 + i * 4096, rkey },
                },
                imm: Some(i as u32),
                issued_at: 0,
            })
            .unwrap();
        }
        let (mut sent, mut imms) = (Vec::new(), Vec::new());
        let deadline = Instant::now() + Duration::from_secs(20);
        while (sent.len() < 16 || imms.len() < 16) && Instant::now() < deadline {
            let mut ev = Vec::new();
            a.poll(64, &mut ev);
            b.poll(64, &mut ev);
            for e in ev {
                match e {
                    CompletionEvent::SendDone { wr_id, result, .. } => {
                        result.unwrap();
                        sent.push(wr_id)
                    }
                    CompletionEvent::ImmReceived { imm, .. } => imms.push(imm),
                    other => panic!("{other:?}"),
                }
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        std::thread::sleep(Duration::from_millis(50));
        let mut ev = Vec::new();
        b.poll(64, &mut ev);
        assert!(ev.is_empty(), "late duplicate events: {ev:?}");
        sent.sort();
        imms.sort();
        assert_eq!(sent, (0..16).collect::<Vec<_>>());
        assert_eq!(imms, (0..16).collect::<Vec<_>>());
        assert_eq!(dst.to_vec(), src.to_vec());
    }

    #[test]
    fn clean_link_delivers() {
        run_lossy(0.0, 0.0);
    }

    #[test]
    fn loss_and_duplication_still_exactly_once() {
        run_lossy(0.2, 0.2);
    }
}
