//! TCP rendezvous used by multi-process runs to swap addresses and region
//! descriptors before any transfer happens.
//!
//! A [`Rendezvous`] server collects keyed rounds: every participant sends
//! `(key, n, rank, blob)` and blocks until `n` distinct ranks have sent the
//! same key, then receives all blobs ordered by rank. A round with an empty
//! blob is a barrier. Frames are documented in `docs/wire.md`.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::wire::{Reader, WireError, Writer};

const MAX_FRAME: usize = 64 << 20;

fn invalid(e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e.to_string())
}

impl From<WireError> for io::Error {
    fn from(e: WireError) -> Self {
        invalid(e)
    }
}

fn write_frame(s: &mut TcpStream, body: &[u8]) -> io::Result<()> {
    s.write_all(&(body.len() as u32).to_le_bytes())?;
    s.write_all(body)
}

fn read_frame(s: &mut TcpStream) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    s.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(invalid(format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    s.read_exact(&mut body)?;
    Ok(body)
}

#[derive(Default)]
struct Round {
    n: u32,
    blobs: BTreeMap<u32, Vec<u8>>,
    served: u32,
}

#[derive(Default)]
struct Rounds {
    rounds: Mutex<HashMap<String, Round>>,
    cv: Condvar,
}

impl Rounds {
    fn join(&self, key: String, n: u32, rank: u32, blob: Vec<u8>) -> io::Result<Vec<(u32, Vec<u8>)>> {
        let mut rounds = self.rounds.lock().unwrap();
        let r = rounds.entry(key.clone()).or_insert_with(|| Round { n, ..Round::default() });
        if r.n != n {
            return Err(invalid(format!("round {key}: size {n} vs {}", r.n)));
        }
        if rank >= n || r.blobs.insert(rank, blob).is_some() {
            return Err(invalid(format!("round {key}: bad or repeated rank {rank}")));
        }
        self.cv.notify_all();
        let mut rounds = self.cv.wait_while(rounds, |m| m.get(&key).is_some_and(|r| (r.blobs.len() as u32) < r.n)).unwrap();
        let r = rounds.get_mut(&key).expect("round vanished");
        let out = r.blobs.iter().map(|(k, v)| (*k, v.clone())).collect();
        r.served += 1;
        if r.served == r.n {
            rounds.remove(&key);
        }
        Ok(out)
    }
}

/// Rendezvous server. Runs until the process exits.
pub struct Rendezvous {
    addr: SocketAddr,
}

impl Rendezvous {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let rounds = Arc::new(Rounds::default());
        thread::Builder::new().name("rendezvous".into()).spawn(move || {
            for conn in listener.incoming() {
                let Ok(conn) = conn else { continue };
                let rounds = rounds.clone();
                thread::spawn(move || {
                    if let Err(e) = serve(conn, &rounds) {
                        if e.kind() != io::ErrorKind::UnexpectedEof {
                            log::warn!("rendezvous connection: {e}");
                        }
                    }
                });
            }
        })?;
        Ok(Self { addr })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

fn serve(mut conn: TcpStream, rounds: &Rounds) -> io::Result<()> {
    conn.set_nodelay(true)?;
    loop {
        let body = read_frame(&mut conn)?;
        let mut r = Reader::new(&body);
        let key = String::from_utf8(r.bytes()?.to_vec()).map_err(invalid)?;
        let n = r.u32()?;
        let rank = r.u32()?;
        let blob = r.bytes()?.to_vec();
        r.finish()?;
        let all = rounds.join(key, n, rank, blob)?;
        let mut w = Writer::new();
        w.u32(all.len() as u32);
        for (rank, blob) in &all {
            w.u32(*rank).bytes(blob);
        }
        write_frame(&mut conn, &w.finish())?;
    }
}

/// One participant's connection to a [`Rendezvous`].
pub struct Bootstrap {
    stream: Mutex<TcpStream>,
    rank: u32,
}

impl Bootstrap {
    /// Connects, retrying until `timeout` while the server comes up.
    pub fn connect(addr: SocketAddr, rank: u32, timeout: Duration) -> io::Result<Self> {
        let deadline = Instant::now() + timeout;
        let stream = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if Instant::now() >= deadline => return Err(e),
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        };
        stream.set_nodelay(true)?;
        Ok(Self { stream: Mutex::new(stream), rank })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    /// Blobs of all `n` participants of round `key`, in rank order.
    pub fn all_gather(&self, key: &str, n: u32, blob: &[u8]) -> io::Result<Vec<Vec<u8>>> {
        let mut w = Writer::new();
        w.bytes(key.as_bytes()).u32(n).u32(self.rank).bytes(blob);
        let mut s = self.stream.lock().unwrap();
        write_frame(&mut s, &w.finish())?;
        let body = read_frame(&mut s)?;
        let mut r = Reader::new(&body);
        let count = r.u32()?;
        let mut out = Vec::with_capacity(count as usize);
        for i in 0..count {
            if r.u32()? != i {
                return Err(invalid("rendezvous reply out of rank order"));
            }
            out.push(r.bytes()?.to_vec());
        }
        r.finish()?;
        Ok(out)
    }

    pub fn barrier(&self, key: &str, n: u32) -> io::Result<()> {
        self.all_gather(key, n, &[]).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_orders_by_rank_and_rounds_are_reusable() {
        let server = Rendezvous::bind("127.0.0.1:0").unwrap();
        let addr = server.local_addr();
        let outs: Vec<_> = (0..3u32)
            .map(|rank| {
                thread::spawn(move || {
                    let b = Bootstrap::connect(addr, rank, Duration::from_secs(5)).unwrap();
                    let first = b.all_gather("a", 3, &[rank as u8; 2]).unwrap();
                    b.barrier("b", 3).unwrap();
                    let again = b.all_gather("a", 3, &[rank as u8 + 10]).unwrap();
                    (first, again)
                })
            })
            .collect();
        for h in outs {
            let (first, again) = h.join().unwrap();
            assert_eq!(first, vec![vec![0, 0], vec![1, 1], vec![2, 2]]);
            assert_eq!(again, vec![vec![10], vec![11], vec![12]]);
        }
    }

    #[test]
    fn repeated_rank_is_rejected() {
        let rounds = Rounds::default();
        let rounds = Arc::new(rounds);
        let r2 = rounds.clone();
        let t = thread::spawn(move || r2.join("k".into(), 2, 0, vec![]));
        thread::sleep(Duration::from_millis(20));
        assert!(rounds.join("k".into(), 2, 0, vec![]).is_err());
        rounds.join("k".into(), 2, 1, vec![]).unwrap();
        t.join().unwrap().unwrap();
    }
}
