//! Domain types shared by the transport, the engine and the protocols.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::TransferError;
use crate::vclock::{self, Nanos};
use crate::wire::{Reader, Wire, WireError, Writer};

pub const MAX_NET_ADDR_LEN: usize = 64;

/// Opaque address of one transport endpoint (one rail of one engine).
///
/// The simulated fabric stores `(node id: u32, rail: u8)`, the socket
/// transport stores `(ip, port)`. Equality is byte equality.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NetAddr(Vec<u8>);

impl NetAddr {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, WireError> {
        let bytes = bytes.into();
        if bytes.len() > MAX_NET_ADDR_LEN {
            return Err(WireError::Invalid("net address longer than 64 bytes"));
        }
        Ok(Self(bytes))
    }

    pub fn sim(node: u32, rail: u8) -> Self {
        let mut b = node.to_le_bytes().to_vec();
        b.push(rail);
        Self(b)
    }

    pub fn as_sim(&self) -> Option<(u32, u8)> {
        (self.0.len() == 5).then(|| (u32::from_le_bytes(self.0[..4].try_into().unwrap()), self.0[4]))
    }

    pub fn from_socket(addr: SocketAddr) -> Self {
        let mut b = match addr.ip() {
            IpAddr::V4(ip) => ip.octets().to_vec(),
            IpAddr::V6(ip) => ip.octets().to_vec(),
        };
        b.extend_from_slice(&addr.port().to_le_bytes());
        Self(b)
    }

    pub fn as_socket(&self) -> Option<SocketAddr> {
        let port = |b: &[u8]| u16::from_le_bytes([b[0], b[1]]);
        match self.0.len() {
            6 => {
                let ip: [u8; 4] = self.0[..4].try_into().unwrap();
                Some(SocketAddr::new(Ipv4Addr::from(ip).into(), port(&self.0[4..])))
            }
            18 => {
                let ip: [u8; 16] = self.0[..16].try_into().unwrap();
                Some(SocketAddr::new(Ipv6Addr::from(ip).into(), port(&self.0[16..])))
            }
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Display for NetAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some((node, rail)) = self.as_sim() {
            write!(f, "sim:{node}.{rail}")
        } else if let Some(sa) = self.as_socket() {
            write!(f, "udp:{sa}")
        } else {
            for b in &self.0 {
                write!(f, "{b:02x}")?;
            }
            Ok(())
        }
    }
}

impl fmt::Debug for NetAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NetAddr({self})")
    }
}

impl Wire for NetAddr {
    fn encode_into(&self, w: &mut Writer) {
        w.u8(self.0.len() as u8).raw(&self.0);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let n = r.u8()? as usize;
        if n > MAX_NET_ADDR_LEN {
            return Err(WireError::Invalid("net address longer than 64 bytes"));
        }
        Ok(Self(r.take(n)?.to_vec()))
    }
}

/// Serializable descriptor of a registered region, handed to peers so they
/// can target it. Carries one `(address, rkey)` pair per rail of the owning
/// domain group.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct MrDesc {
    pub base: u64,
    pub len: u64,
    pub rkeys: Vec<(NetAddr, u64)>,
}

impl MrDesc {
    pub fn validate(&self) -> Result<(), WireError> {
        if self.rkeys.is_empty() {
            return Err(WireError::Invalid("descriptor without rkeys"));
        }
        for (i, (a, _)) in self.rkeys.iter().enumerate() {
            if self.rkeys[..i].iter().any(|(b, _)| a == b) {
                return Err(WireError::Invalid("duplicate rail address in descriptor"));
            }
        }
        Ok(())
    }

    /// Address of the first rail; the engine's main address for host regions.
    pub fn main_addr(&self) -> &NetAddr {
        &self.rkeys[0].0
    }
}

impl Wire for MrDesc {
    fn encode_into(&self, w: &mut Writer) {
        w.u64(self.base).u64(self.len).u32(self.rkeys.len() as u32);
        for (addr, rkey) in &self.rkeys {
            w.put(addr).u64(*rkey);
        }
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let base = r.u64()?;
        let len = r.u64()?;
        let n = r.u32()? as usize;
        // Each entry takes at least 9 bytes; refuse counts the input cannot hold.
        if n > r.remaining() / 9 {
            return Err(WireError::Truncated { needed: n * 9 - r.remaining() });
        }
        let mut rkeys = Vec::with_capacity(n);
        for _ in 0..n {
            let addr = r.get::<NetAddr>()?;
            rkeys.push((addr, r.u64()?));
        }
        let desc = Self { base, len, rkeys };
        desc.validate()?;
        Ok(desc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Device {
    Host,
    Gpu(u8),
}

impl Device {
    /// Domain group serving this device. The first group also serves the host.
    pub fn group(self) -> usize {
        match self {
            Device::Host => 0,
            Device::Gpu(i) => i as usize,
        }
    }
}

/// Local handle of a registered region. Only meaningful to the engine that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MrHandle {
    pub(crate) engine: u64,
    pub id: u64,
    pub base: u64,
    pub len: u64,
    pub device: Device,
}

/// Paged addressing: page `i` lives at `offset + indices[i] * stride`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Pages {
    pub indices: Vec<u32>,
    pub stride: u64,
    pub offset: u64,
}

impl Pages {
    pub fn page_offset(&self, i: usize) -> u64 {
        self.offset + self.indices[i] as u64 * self.stride
    }

    /// Checks every page `[start, start+page_len)` fits in `region_len`.
    pub fn check_bounds(&self, page_len: u64, region_len: u64) -> bool {
        self.indices.iter().all(|&i| {
            (i as u64)
                .checked_mul(self.stride)
                .and_then(|x| x.checked_add(self.offset))
                .and_then(|x| x.checked_add(page_len))
                .is_some_and(|end| end <= region_len)
        })
    }
}

impl Wire for Pages {
    fn encode_into(&self, w: &mut Writer) {
        w.u32(self.indices.len() as u32);
        for i in &self.indices {
            w.u32(*i);
        }
        w.u64(self.stride).u64(self.offset);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let n = r.u32()? as usize;
        if n > r.remaining() / 4 {
            return Err(WireError::Truncated { needed: n * 4 - r.remaining() });
        }
        let indices = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
        Ok(Self { indices, stride: r.u64()?, offset: r.u64()? })
    }
}

/// One destination of a scatter: `len` bytes from `src` in the local source
/// region to `dst.1` in the remote region `dst.0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScatterDst {
    pub len: u64,
    pub src: u64,
    pub dst: (MrDesc, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PeerGroupHandle(pub(crate) u64);

/// Completion flag observable from any thread.
#[derive(Default)]
pub struct DoneFlag {
    state: AtomicU8,
    at: AtomicU64,
    error: Mutex<Option<TransferError>>,
    cv: Condvar,
    lock: Mutex<()>,
}

const PENDING: u8 = 0;
const OK: u8 = 1;
const FAILED: u8 = 2;

impl DoneFlag {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn is_set(&self) -> bool {
        self.state.load(Ordering::Acquire) != PENDING
    }

    pub(crate) fn complete(&self, result: Result<(), TransferError>, at: Nanos) {
        self.at.store(at, Ordering::Relaxed);
        let state = match result {
            Ok(()) => OK,
            Err(e) => {
                *self.error.lock().unwrap() = Some(e);
                FAILED
            }
        };
        let _g = self.lock.lock().unwrap();
        self.state.store(state, Ordering::Release);
        self.cv.notify_all();
    }

    /// Result once set; `None` while pending. Folds the completion time into
    /// the caller's clock.
    pub fn result(&self) -> Option<Result<(), TransferError>> {
        match self.state.load(Ordering::Acquire) {
            PENDING => None,
            s => {
                vclock::observe(self.at.load(Ordering::Relaxed));
                Some(if s == OK { Ok(()) } else { Err(self.error.lock().unwrap().clone().unwrap_or(TransferError::Cancelled)) })
            }
        }
    }

    pub fn completed_at(&self) -> Nanos {
        self.at.load(Ordering::Relaxed)
    }

    /// Blocks until set or until `timeout` elapses.
    pub fn wait_timeout(&self, timeout: Duration) -> Option<Result<(), TransferError>> {
        let deadline = std::time::Instant::now() + timeout;
        let mut g = self.lock.lock().unwrap();
        while !self.is_set() {
            let now = std::time::Instant::now();
            if now >= deadline {
                return None;
            }
            g = self.cv.wait_timeout(g, deadline - now).unwrap().0;
        }
        drop(g);
        self.result()
    }

    pub fn wait(&self) -> Result<(), TransferError> {
        loop {
            if let Some(r) = self.wait_timeout(Duration::from_secs(3600)) {
                return r;
            }
        }
    }
}

impl fmt::Debug for DoneFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DoneFlag").field("state", &self.state.load(Ordering::Relaxed)).finish()
    }
}

pub type DoneCallback = Box<dyn FnOnce(Result<(), TransferError>) + Send>;

/// How completion of an operation is reported. Fired exactly once, after all
/// constituent writes completed.
pub enum OnDone {
    Callback(DoneCallback),
    Flag(Arc<DoneFlag>),
    Ignore,
}

impl OnDone {
    pub fn callback(f: impl FnOnce(Result<(), TransferError>) + Send + 'static) -> Self {
        OnDone::Callback(Box::new(f))
    }

    pub fn flag() -> (Self, Arc<DoneFlag>) {
        let f = DoneFlag::new();
        (OnDone::Flag(f.clone()), f)
    }
}

impl fmt::Debug for OnDone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OnDone::Callback(_) => f.write_str("OnDone::Callback"),
            OnDone::Flag(x) => write!(f, "OnDone::Flag({x:?})"),
            OnDone::Ignore => f.write_str("OnDone::Ignore"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn desc(rng: &mut impl Rng) -> MrDesc {
        let n = rng.gen_range(1..=4);
        let rkeys = (0..n)
            .map(|i| {
                let mut a: Vec<u8> = (0..rng.gen_range(0..=60)).map(|_| rng.gen()).collect();
                a.push(i as u8);
                (NetAddr::new(a).unwrap(), rng.gen())
            })
            .collect();
        MrDesc { base: rng.gen(), len: rng.gen(), rkeys }
    }

    #[test]
    fn net_addr_round_trip() {
        let a = NetAddr::new(vec![1, 2, 3, 4]).unwrap();
        assert_eq!(NetAddr::decode(&a.encode()).unwrap(), a);
        assert!(NetAddr::new(vec![0; 65]).is_err());
    }

    #[test]
    fn zero_desc_round_trips() {
        let d = MrDesc { base: 0, len: 0, rkeys: vec![(NetAddr::sim(0, 0), 0)] };
        assert_eq!(MrDesc::decode(&d.encode()).unwrap(), d);
    }

    #[test]
    fn random_descs_round_trip_bit_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let d = desc(&mut rng);
            let enc = d.encode();
            let back = MrDesc::decode(&enc).unwrap();
            assert_eq!(back, d);
            assert_eq!(back.encode(), enc);
        }
    }

    #[test]
    fn decode_rejects_truncation_and_trailing_bytes() {
        let d = MrDesc { base: 1, len: 2, rkeys: vec![(NetAddr::sim(3, 0), 4), (NetAddr::sim(3, 1), 5)] };
        let enc = d.encode();
        for cut in 0..enc.len() {
            assert!(MrDesc::decode(&enc[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = enc.clone();
        long.push(0);
        assert_eq!(MrDesc::decode(&long), Err(WireError::Trailing(1)));
    }

    #[test]
    fn decode_rejects_invalid_descs() {
        let empty = MrDesc { base: 0, len: 0, rkeys: vec![] };
        assert!(MrDesc::decode(&empty.encode()).is_err());
        let dup = MrDesc { base: 0, len: 0, rkeys: vec![(NetAddr::sim(1, 0), 1), (NetAddr::sim(1, 0), 2)] };
        assert!(MrDesc::decode(&dup.encode()).is_err());
    }

    #[test]
    fn socket_and_sim_addresses_parse_back() {
        let sa: SocketAddr = "127.0.0.1:4242".parse().unwrap();
        assert_eq!(NetAddr::from_socket(sa).as_socket(), Some(sa));
        let sa6: SocketAddr = "[::1]:7".parse().unwrap();
        assert_eq!(NetAddr::from_socket(sa6).as_socket(), Some(sa6));
        assert_eq!(NetAddr::sim(9, 2).as_sim(), Some((9, 2)));
    }

    #[test]
    fn page_bounds() {
        let p = Pages { indices: vec![0, 3], stride: 100, offset: 10 };
        assert!(p.check_bounds(50, 360));
        assert!(!p.check_bounds(51, 360));
        let huge = Pages { indices: vec![u32::MAX], stride: u64::MAX, offset: 0 };
        assert!(!huge.check_bounds(1, u64::MAX));
    }

    proptest! {
        #[test]
        fn fuzzed_decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            let _ = MrDesc::decode(&bytes);
            let _ = NetAddr::decode(&bytes);
        }

        #[test]
        fn encoding_is_injective(a in proptest::collection::vec(any::<u8>(), 0..64),
                                 b in proptest::collection::vec(any::<u8>(), 0..64)) {
            let (x, y) = (NetAddr::new(a).unwrap(), NetAddr::new(b).unwrap());
            prop_assert_eq!(x == y, x.encode() == y.encode());
        }
    }
}
