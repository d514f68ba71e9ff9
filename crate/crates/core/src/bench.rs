//! Desk-scale benchmarks: point-to-point write throughput and MoE
//! dispatch/combine latency.
//!
//! On the simulated fabric all timings are model time, so reports depend
//! only on the configuration and the seed. Over sockets they are wall time.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::moe::{MoeError, MoeRank, PhaseTimes, RoutingSpec, ShmNode};
use crate::transport::sim::{FaultConfig, SimFabric};
use crate::transport::Transport;
use crate::types::{Device, DoneFlag, OnDone, Pages};
use crate::vclock::{self, Nanos};
use crate::{DeviceBuffer, EngineConfig, Trace, TransferEngine, TransferError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error("{0}")]
    Config(String),
}

/// 10 Gbps.
pub const DEFAULT_RAIL_BYTES_PER_SEC: u64 = 1_250_000_000;

#[derive(Debug, Clone)]
pub struct P2pConfig {
    pub rails: usize,
    pub single_sizes: Vec<usize>,
    pub page_sizes: Vec<usize>,
    /// Bytes moved by one paged operation.
    pub paged_bytes: usize,
    pub iters: usize,
    /// Per-rail line rate used for the fraction column, if known.
    pub rail_bytes_per_sec: Option<u64>,
}

impl Default for P2pConfig {
    fn default() -> Self {
        Self {
            rails: 2,
            single_sizes: vec![64 << 10, 256 << 10, 1 << 20, 32 << 20],
            page_sizes: vec![1 << 10, 8 << 10, 16 << 10, 64 << 10],
            paged_bytes: 8 << 20,
            iters: 4,
            rail_bytes_per_sec: Some(DEFAULT_RAIL_BYTES_PER_SEC),
        }
    }
}

impl P2pConfig {
    /// The rate-capped simulated fabric these benchmarks default to.
    pub fn sim_fabric(&self) -> FaultConfig {
        FaultConfig { rail_bytes_per_sec: self.rail_bytes_per_sec, mtu: None, ..FaultConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct P2pRow {
    /// "single" or "paged".
    pub kind: &'static str,
    /// Message size for single writes, page size for paged writes.
    pub size: usize,
    pub bytes_per_sec: f64,
    pub gbps: f64,
    /// Throughput over the aggregate line rate of all rails.
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct P2pReport {
    pub rails: usize,
    pub line_rate_bytes_per_sec: Option<u64>,
    pub rows: Vec<P2pRow>,
}

impl P2pReport {
    pub fn row(&self, kind: &str, size: usize) -> Option<&P2pRow> {
        self.rows.iter().find(|r| r.kind == kind && r.size == size)
    }
}

fn wait_done(flag: &DoneFlag) -> Result<(), BenchError> {
    match flag.wait_timeout(Duration::from_secs(120)) {
        Some(r) => Ok(r?),
        None => Err(BenchError::Config("transfer did not complete within 120 s".into())),
    }
}

/// Times `op` as one operation at queue depth one. Model time when the
/// transport is virtual, wall time otherwise.
fn timed(virtual_time: bool, op: impl FnOnce(OnDone) -> Result<(), TransferError>) -> Result<Nanos, BenchError> {
    let (od, flag) = OnDone::flag();
    let (t0, w0) = (vclock::now(), Instant::now());
    op(od)?;
    wait_done(&flag)?;
    if virtual_time {
        vclock::observe(flag.completed_at());
        Ok(vclock::now() - t0)
    } else {
        Ok(w0.elapsed().as_nanos() as Nanos)
    }
}

/// Single and paged write throughput between two engines on `transport`.
pub fn bench_p2p(transport: &dyn Transport, cfg: &P2pConfig) -> Result<P2pReport, BenchError> {
    if cfg.iters == 0 {
        return Err(BenchError::Config("iters must be positive".into()));
    }
    let a = TransferEngine::new(transport, EngineConfig::named("bench-a").rails(cfg.rails))?;
    let b = TransferEngine::new(transport, EngineConfig::named("bench-b").rails(cfg.rails))?;
    let virt = transport.virtual_time();
    let cap = cfg.single_sizes.iter().copied().chain([cfg.paged_bytes]).max().unwrap_or(0);
    let src = DeviceBuffer::new(cap);
    src.write(0, &(0..cap).map(|i| (i * 31 + 7) as u8).collect::<Vec<_>>());
    let dst = DeviceBuffer::new(cap);
    let (hs, _) = a.reg_mr(&src, Device::Host)?;
    let (hd, dd) = b.reg_mr(&dst, Device::Host)?;
    let line = cfg.rail_bytes_per_sec.map(|r| r * cfg.rails as u64);
    let row = |kind, size, bytes: usize, ns: Nanos| {
        let bps = bytes as f64 * 1e9 / ns.max(1) as f64;
        P2pRow { kind, size, bytes_per_sec: bps, gbps: bps * 8.0 / 1e9, fraction: line.map(|l| bps / l as f64) }
    };
    let mut rows = Vec::new();
    for &size in &cfg.single_sizes {
        let mut total = 0;
        for _ in 0..cfg.iters {
            total += timed(virt, |od| a.submit_single_write(size as u64, None, (hs, 0), (&dd, 0), od))?;
        }
        rows.push(row("single", size, size * cfg.iters, total));
    }
    for &page in &cfg.page_sizes {
        let n = (cfg.paged_bytes / page.max(1)) as u32;
        let pages = Pages { indices: (0..n).collect(), stride: page as u64, offset: 0 };
        let mut total = 0;
        for _ in 0..cfg.iters {
            total += timed(virt, |od| a.submit_paged_writes(page as u64, None, (hs, &pages), (&dd, &pages), od))?;
        }
        rows.push(row("paged", page, n as usize * page * cfg.iters, total));
    }
    a.dereg_mr(hs)?;
    b.dereg_mr(hd)?;
    a.shutdown();
    b.shutdown();
    Ok(P2pReport { rails: cfg.rails, line_rate_bytes_per_sec: line, rows })
}

#[derive(Debug, Clone)]
pub struct MoeBenchConfig {
    pub spec: RoutingSpec,
    pub fabric: FaultConfig,
    pub rails: usize,
    pub seed: u64,
    pub warmup: usize,
    pub iters: usize,
    pub trace: Option<Arc<Trace>>,
}

impl Default for MoeBenchConfig {
    fn default() -> Self {
        Self {
            spec: RoutingSpec { ranks: 4, experts: 16, tokens: 64, topk: 4, ..RoutingSpec::default() },
            fabric: FaultConfig {
                latency_min_ns: 10_000,
                latency_max_ns: 10_000,
                rail_bytes_per_sec: Some(DEFAULT_RAIL_BYTES_PER_SEC),
                mtu: None,
                ..FaultConfig::default()
            },
            rails: 2,
            seed: 1,
            warmup: 100,
            iters: 1000,
            trace: None,
        }
    }
}

/// Mean and nearest-rank percentiles, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Percentiles {
    pub mean: f64,
    pub p01: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Percentiles {
    pub fn of(samples_ns: &[Nanos]) -> Self {
        let mut s = samples_ns.to_vec();
        s.sort_unstable();
        let us = |x: Nanos| x as f64 / 1e3;
        let at = |q: f64| {
            if s.is_empty() {
                return 0.0;
            }
            let rank = (q * s.len() as f64).ceil().max(1.0) as usize;
            us(s[rank.min(s.len()) - 1])
        };
        let mean = if s.is_empty() { 0.0 } else { s.iter().map(|&x| us(x)).sum::<f64>() / s.len() as f64 };
        Self { mean, p01: at(0.01), p25: at(0.25), p50: at(0.5), p75: at(0.75), p95: at(0.95), p99: at(0.99) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MoeReport {
    pub ranks: usize,
    pub private: usize,
    /// Samples per phase: benchmarked steps times ranks.
    pub samples: usize,
    pub phases: BTreeMap<&'static str, Percentiles>,
    pub network_writes: u64,
}

const PHASES: [&str; 6] = ["dispatch_send", "dispatch_recv", "combine_send", "combine_recv", "dispatch", "combine"];

fn phase_values(t: &PhaseTimes) -> [Nanos; 6] {
    [t.dispatch_send, t.dispatch_recv, t.combine_send, t.combine_recv, t.dispatch, t.combine]
}

struct StepData {
    tokens: Vec<u8>,
    routes: Vec<Vec<u32>>,
    weights: Vec<f32>,
}

/// Every rank sends a full batch of `T` tokens with distinct random experts.
fn make_step(spec: &RoutingSpec, rng: &mut ChaCha8Rng) -> StepData {
    let mut tokens = vec![0u8; spec.tokens * spec.token_bytes];
    rng.fill(&mut tokens[..]);
    let routes = (0..spec.tokens).map(|_| sample(rng, spec.experts, spec.topk).into_iter().map(|e| e as u32).collect()).collect();
    let weights = vec![1.0 / spec.topk as f32; spec.tokens * spec.topk];
    StepData { tokens, routes, weights }
}

/// `warmup + iters` steps on `spec.ranks` in-process ranks. Every step
/// starts on all ranks at the same model time.
pub fn bench_moe(cfg: &MoeBenchConfig) -> Result<MoeReport, BenchError> {
    let spec = &cfg.spec;
    spec.validate()?;
    let fabric = match &cfg.trace {
        Some(t) => SimFabric::with_trace(cfg.fabric.clone(), cfg.seed, t.clone()),
        None => SimFabric::new(cfg.fabric.clone(), cfg.seed),
    };
    let engines: Vec<TransferEngine> = (0..spec.ranks)
        .map(|i| TransferEngine::new(&*fabric, EngineConfig::named(format!("moe{i}")).rails(cfg.rails).trace(cfg.trace.clone())))
        .collect::<Result<_, _>>()?;
    let mut nodes: BTreeMap<usize, Arc<ShmNode>> = BTreeMap::new();
    let mut ranks = Vec::with_capacity(spec.ranks);
    for (r, e) in engines.iter().enumerate() {
        let node = nodes.entry(spec.node_of(r)).or_default().clone();
        ranks.push(MoeRank::new(e.clone(), spec.clone(), r, node)?);
    }
    let descs: Vec<_> = ranks.iter().map(|r| r.desc().clone()).collect();
    for r in &mut ranks {
        r.connect(&descs)?;
    }

    let steps = cfg.warmup + cfg.iters;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs: Vec<Vec<StepData>> = (0..steps).map(|_| (0..spec.ranks).map(|_| make_step(spec, &mut rng)).collect()).collect();
    let barrier = Barrier::new(spec.ranks);
    let start = AtomicU64::new(0);
    let samples = Mutex::new(vec![Vec::with_capacity(cfg.iters * spec.ranks); PHASES.len()]);
    let dim = spec.dim;
    let result: Result<(), BenchError> = std::thread::scope(|s| {
        let handles: Vec<_> = ranks
            .iter_mut()
            .enumerate()
            .map(|(r, rank)| {
                let (barrier, start, samples, inputs) = (&barrier, &start, &samples, &inputs);
                s.spawn(move || -> Result<(), BenchError> {
                    for (step, input) in inputs.iter().enumerate() {
                        start.fetch_max(rank.clock(), Ordering::SeqCst);
                        barrier.wait();
                        rank.align_clock(start.load(Ordering::SeqCst));
                        barrier.wait();
                        let d = &input[r];
                        rank.dispatch_send(&d.tokens, &d.routes)?;
                        let packed = rank.dispatch_recv()?;
                        // Stand-in expert: the token's leading bytes as floats.
                        let out: Vec<f32> = (0..packed.rows())
                            .flat_map(|i| {
                                let row = packed.row(i);
                                (0..dim).map(move |j| row[j % row.len()] as f32)
                            })
                            .collect();
                        rank.combine_send(&packed, &out)?;
                        rank.combine_recv(&d.weights)?;
                        if step >= cfg.warmup {
                            let mut s = samples.lock().unwrap();
                            for (i, v) in phase_values(&rank.times()).into_iter().enumerate() {
                                s[i].push(v);
                            }
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("rank thread panicked"))
    });
    result?;
    let network_writes = ranks.iter().map(|r| r.stats().network_writes).sum();
    drop(ranks);
    for e in engines {
        e.shutdown();
    }
    let samples = samples.into_inner().unwrap();
    Ok(MoeReport {
        ranks: spec.ranks,
        private: spec.private,
        samples: samples[0].len(),
        phases: PHASES.iter().zip(&samples).map(|(p, s)| (*p, Percentiles::of(s))).collect(),
        network_writes,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub private: usize,
    pub dispatch: Percentiles,
    pub combine: Percentiles,
}

/// Dispatch latency for each private-buffer size in `privates`.
pub fn private_sweep(cfg: &MoeBenchConfig, privates: &[usize]) -> Result<Vec<SweepPoint>, BenchError> {
    privates
        .iter()
        .map(|&p| {
            let c = MoeBenchConfig { spec: RoutingSpec { private: p, ..cfg.spec.clone() }, ..cfg.clone() };
            let r = bench_moe(&c)?;
            Ok(SweepPoint { private: p, dispatch: r.phases["dispatch"], combine: r.phases["combine"] })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let s: Vec<Nanos> = (1..=100).map(|x| x * 1000).collect();
        let p = Percentiles::of(&s);
        assert_eq!((p.p01, p.p25, p.p50, p.p75, p.p95, p.p99), (1.0, 25.0, 50.0, 75.0, 95.0, 99.0));
        assert_eq!(p.mean, 50.5);
        assert_eq!(Percentiles::of(&[]).p50, 0.0);
    }
}
