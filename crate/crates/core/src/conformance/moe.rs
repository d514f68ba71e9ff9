//! MoE invariants against a brute-force all-to-all: dispatched token
//! multisets, combine accuracy, capacity, per-peer write budget, host
//! signal ordering and send-buffer reuse.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cluster, ensure, CheckResult};
use crate::moe::{MoeRank, Packed, RoutingSpec, ShmNode};
use crate::trace::{Trace, TraceEvent, TraceKind};
use crate::transport::sim::FaultConfig;
use crate::TransferEngine;

/// Absolute tolerance of combine outputs against the f32 reference.
pub const COMBINE_TOL: f32 = 1e-6;

pub fn run_all(cfg: &FaultConfig, seed: u64) -> Vec<(&'static str, CheckResult)> {
    let base = RoutingSpec { ranks: 4, experts: 8, tokens: 16, topk: 2, token_bytes: 40, dim: 8, private: 4, ..RoutingSpec::default() };
    vec![
        ("moe random steps", scenario(cfg, seed, &base, 3)),
        ("moe no private buffer", scenario(cfg, seed, &RoutingSpec { private: 0, ..base.clone() }, 2)),
        ("moe everything speculative", scenario(cfg, seed, &RoutingSpec { private: 16, topk: 1, ..base.clone() }, 2)),
        ("moe two ranks one per node", scenario(cfg, seed, &RoutingSpec { ranks: 2, experts: 4, ..base.clone() }, 2)),
        ("moe eight ranks top-4", scenario(cfg, seed, &RoutingSpec { ranks: 8, experts: 16, topk: 4, private: 2, ..base }, 2)),
        ("moe empty step", empty_step(cfg, seed)),
    ]
}

/// Per-rank tokens, routes and combine weights of one step.
#[derive(Debug, Clone)]
pub struct StepInput {
    pub tokens: Vec<Vec<u8>>,
    pub routes: Vec<Vec<Vec<u32>>>,
    pub weights: Vec<Vec<f32>>,
}

/// Random token counts in `0..=T`; each token starts with its origin rank
/// and index so the oracle can tell copies apart.
pub fn random_step(spec: &RoutingSpec, rng: &mut impl Rng) -> StepInput {
    let mut input = StepInput { tokens: vec![], routes: vec![], weights: vec![] };
    for r in 0..spec.ranks {
        let n = rng.gen_range(0..=spec.tokens);
        let mut tokens = Vec::with_capacity(n * spec.token_bytes);
        let mut routes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n * spec.topk);
        for t in 0..n {
            let mut tok = vec![0u8; spec.token_bytes];
            rng.fill(&mut tok[..]);
            let id = ((r as u32) << 16 | t as u32).to_le_bytes();
            let k = id.len().min(spec.token_bytes);
            tok[..k].copy_from_slice(&id[..k]);
            tokens.extend_from_slice(&tok);
            routes.push(sample(rng, spec.experts, spec.topk).into_iter().map(|e| e as u32).collect());
            let w: Vec<f32> = (0..spec.topk).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            let sum: f32 = w.iter().sum::<f32>().max(f32::MIN_POSITIVE);
            weights.extend(w.iter().map(|x| x / sum));
        }
        input.tokens.push(tokens);
        input.routes.push(routes);
        input.weights.push(weights);
    }
    input
}

/// Stand-in expert: deterministic in (expert, token bytes).
pub fn expert_fn(expert: u32, token: &[u8], dim: usize) -> Vec<f32> {
    (0..dim).map(|j| (token[j % token.len()] as f32 - 128.0) / 64.0 + expert as f32 * 0.25 - j as f32 * 0.001).collect()
}

/// Ranks on `engines`, one shared-memory node per `node_size` ranks,
/// connected to each other.
pub fn build_ranks(engines: &[TransferEngine], spec: &RoutingSpec) -> Result<Vec<MoeRank>, String> {
    let mut nodes: BTreeMap<usize, std::sync::Arc<ShmNode>> = BTreeMap::new();
    let mut ranks = Vec::with_capacity(spec.ranks);
    for (r, e) in engines.iter().enumerate().take(spec.ranks) {
        let node = nodes.entry(spec.node_of(r)).or_default().clone();
        ranks.push(MoeRank::new(e.clone(), spec.clone(), r, node).map_err(|x| x.to_string())?);
    }
    let descs: Vec<_> = ranks.iter().map(|r| r.desc().clone()).collect();
    for r in &mut ranks {
        r.connect(&descs).map_err(|x| x.to_string())?;
    }
    Ok(ranks)
}

/// Runs one dispatch/expert/combine step on every rank concurrently.
pub fn run_step(ranks: &mut [MoeRank], input: &StepInput) -> Result<Vec<(Packed, Vec<f32>)>, String> {
    std::thread::scope(|s| {
        let handles: Vec<_> = ranks
            .iter_mut()
            .enumerate()
            .map(|(r, rank)| {
                s.spawn(move || -> Result<(Packed, Vec<f32>), String> {
                    let dim = rank.spec().dim;
                    rank.dispatch_send(&input.tokens[r], &input.routes[r]).map_err(|e| format!("rank {r} dispatch_send: {e}"))?;
                    let packed = rank.dispatch_recv().map_err(|e| format!("rank {r} dispatch_recv: {e}"))?;
                    let mut out = vec![0f32; packed.rows() * dim];
                    for g in &packed.groups {
                        for i in g.start..g.start + g.rows {
                            out[i * dim..(i + 1) * dim].copy_from_slice(&expert_fn(g.expert, packed.row(i), dim));
                        }
                    }
                    rank.combine_send(&packed, &out).map_err(|e| format!("rank {r} combine_send: {e}"))?;
                    let combined = rank.combine_recv(&input.weights[r]).map_err(|e| format!("rank {r} combine_recv: {e}"))?;
                    Ok((packed, combined))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().map_err(|_| "rank thread panicked".to_string())?).collect()
    })
}

/// Each rank received exactly the (token, expert) pairs a direct
/// all-to-all would deliver, grouped and padded.
pub fn check_dispatch(spec: &RoutingSpec, input: &StepInput, packed: &[&Packed]) -> CheckResult {
    let epr = spec.experts_per_rank();
    let tb = spec.token_bytes;
    for (d, p) in packed.iter().enumerate() {
        let mut want: Vec<(u32, &[u8])> = Vec::new();
        for (s, routes) in input.routes.iter().enumerate() {
            for (t, r) in routes.iter().enumerate() {
                for &e in r {
                    if e as usize / epr == d {
                        want.push((e, &input.tokens[s][t * tb..(t + 1) * tb]));
                    }
                }
            }
        }
        let mut got: Vec<(u32, &[u8])> = Vec::new();
        ensure!(p.groups.len() == epr, "rank {d}: {} groups for {epr} local experts", p.groups.len());
        for (le, g) in p.groups.iter().enumerate() {
            ensure!(g.expert as usize == d * epr + le, "rank {d}: group {le} is expert {}", g.expert);
            ensure!(g.padded % spec.pad == 0 && g.padded - g.rows < spec.pad, "rank {d}: group padded {} for {} rows", g.padded, g.rows);
            for i in g.start..g.start + g.padded {
                if i < g.start + g.rows {
                    ensure!(p.origins[i].is_some(), "rank {d}: row {i} has no origin");
                    got.push((g.expert, p.row(i)));
                } else {
                    ensure!(p.origins[i].is_none() && p.row(i).iter().all(|&b| b == 0), "rank {d}: padding row {i} is not empty");
                }
            }
        }
        want.sort();
        got.sort();
        ensure!(got == want, "rank {d}: received {} (token, expert) pairs, oracle {}; multisets differ", got.len(), want.len());
    }
    Ok(())
}

/// Combined outputs against an f32 accumulator over the oracle expert
/// outputs, within 1e-6 absolute.
pub fn check_combine(spec: &RoutingSpec, input: &StepInput, combined: &[&[f32]]) -> CheckResult {
    let tb = spec.token_bytes;
    let dim = spec.dim;
    let mut worst = 0f32;
    for (s, out) in combined.iter().enumerate() {
        ensure!(out.len() == input.routes[s].len() * dim, "rank {s}: {} outputs", out.len());
        for (t, r) in input.routes[s].iter().enumerate() {
            let tok = &input.tokens[s][t * tb..(t + 1) * tb];
            let mut acc = vec![0f32; dim];
            for (k, &e) in r.iter().enumerate() {
                let w = input.weights[s][t * spec.topk + k];
                for (a, y) in acc.iter_mut().zip(expert_fn(e, tok, dim)) {
                    *a += w * y;
                }
            }
            for j in 0..dim {
                worst = worst.max((acc[j] - out[t * dim + j]).abs());
            }
        }
    }
    ensure!(worst <= COMBINE_TOL, "combine deviates from the reference by {worst:e}");
    Ok(())
}

fn rail_owner(engines: &[TransferEngine]) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for (i, e) in engines.iter().enumerate() {
        for g in 0..e.groups() {
            for a in e.group_addrs(g) {
                out.insert(a.to_string(), i);
            }
        }
    }
    out
}

/// Network transfers per (source, destination) pair and phase. Per
/// inter-node pair and step: one speculative write, a second dispatch write
/// only when the pair's tokens overflowed the private slot, one combine
/// write and one barrier write. Nothing between ranks of one node.
pub fn check_write_budget(events: &[TraceEvent], engines: &[TransferEngine], spec: &RoutingSpec, inputs: &[StepInput]) -> CheckResult {
    let steps = inputs.len() as u64;
    let epr = spec.experts_per_rank();
    // Steps in which s sent d more tokens than its private slot holds.
    let overflow = |s: usize, d: usize| {
        inputs.iter().filter(|i| i.routes[s].iter().flatten().filter(|&&e| e as usize / epr == d).count() > spec.private).count() as u64
    };
    let owner = rail_owner(engines);
    let mut transfers: HashMap<(usize, u64, usize), Option<u32>> = HashMap::new();
    for e in events {
        if let TraceKind::Post { from, to, transfer, imm, .. } = &e.kind {
            let (Some(&f), Some(&t)) = (owner.get(from), owner.get(to)) else { continue };
            let entry = transfers.entry((f, *transfer, t)).or_insert(None);
            if imm.is_some() {
                *entry = *imm;
            }
        }
    }
    // (from, to, class) -> transfers
    let mut counts: HashMap<(usize, usize, u32), u64> = HashMap::new();
    for ((f, _, t), imm) in transfers {
        let Some(imm) = imm else { continue };
        if imm < spec.imm_base || imm >= spec.imm_base + 4 * 256 {
            continue;
        }
        *counts.entry((f, t, (imm - spec.imm_base) / 256)).or_default() += 1;
    }
    for s in 0..spec.ranks {
        for d in 0..spec.ranks {
            let inter = spec.node_of(s) != spec.node_of(d);
            let get = |c: u32| counts.get(&(s, d, c)).copied().unwrap_or(0);
            let dispatch = get(0) + get(1);
            let combine = get(2);
            let barrier = get(3);
            if inter {
                let (route, tokens) = (get(0), get(1));
                ensure!(route == steps, "{s}->{d}: {route} speculative writes over {steps} steps");
                let want = overflow(s, d);
                ensure!(tokens == want, "{s}->{d}: {tokens} contiguous writes, {want} steps overflowed the private slot");
                ensure!(dispatch <= 2 * steps, "{s}->{d}: {dispatch} dispatch writes over {steps} steps");
                ensure!(combine == steps, "{s}->{d}: {combine} combine writes over {steps} steps");
                ensure!(barrier == steps, "{s}->{d}: {barrier} barrier writes over {steps} steps");
            } else {
                ensure!(dispatch + combine + barrier == 0, "{s}->{d} share a node but exchanged network writes");
            }
        }
    }
    Ok(())
}

fn marks<'a>(events: &'a [TraceEvent], node: &'a str) -> impl Iterator<Item = (usize, &'a str, u64)> + 'a {
    events.iter().enumerate().filter_map(move |(i, e)| match &e.kind {
        TraceKind::Mark { node: n, label, value } if n == node => Some((i, label.as_str(), *value)),
        _ => None,
    })
}

/// The host signal of every step precedes that step's node copies.
pub fn check_host_first(events: &[TraceEvent], engines: &[TransferEngine]) -> CheckResult {
    for e in engines {
        let mut signalled = HashSet::new();
        let mut copies = 0;
        for (_, label, step) in marks(events, e.name()) {
            match label {
                "host_signal" => {
                    signalled.insert(step);
                }
                "shm_copy" => {
                    ensure!(signalled.contains(&step), "{}: node copies of step {step} before the host signal", e.name());
                    copies += 1;
                }
                _ => {}
            }
        }
        ensure!(copies == signalled.len(), "{}: {} signals, {copies} copy phases", e.name(), signalled.len());
    }
    Ok(())
}

/// No dispatch payload from a rank lands after that rank started storing
/// combine outputs into the shared send buffer, and combine stores never
/// precede both fences.
pub fn check_buffer_reuse(events: &[TraceEvent], engines: &[TransferEngine], ranks: &[MoeRank]) -> CheckResult {
    let owner = rail_owner(engines);
    let areas: Vec<(u64, u64)> = ranks.iter().map(|r| r.dispatch_area()).collect();
    let mut combining = vec![false; ranks.len()];
    let mut fences: Vec<HashSet<(&str, u64)>> = vec![HashSet::new(); ranks.len()];
    for e in events {
        match &e.kind {
            TraceKind::Mark { node, label, value } => {
                let Some(r) = engines.iter().position(|x| x.name() == node) else { continue };
                if r >= ranks.len() {
                    continue;
                }
                match label.as_str() {
                    "host_signal" => combining[r] = false,
                    "rdma_fence" | "nvlink_fence" => {
                        fences[r].insert((label.as_str(), *value));
                    }
                    "combine_store" => {
                        ensure!(
                            fences[r].contains(&("rdma_fence", *value)) && fences[r].contains(&("nvlink_fence", *value)),
                            "{node}: combine stores of step {value} before both fences"
                        );
                        combining[r] = true;
                    }
                    _ => {}
                }
            }
            TraceKind::WriteApplied { at, from, addr, len } => {
                let (Some(&s), Some(&d)) = (owner.get(from), owner.get(at)) else { continue };
                // Immediate-only writes (barriers) carry no payload.
                if *len > 0 && s < ranks.len() && d < ranks.len() && *addr >= areas[d].0 && *addr < areas[d].1 {
                    ensure!(!combining[s], "dispatch payload from rank {s} landed after it began combine stores");
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// No write into a contiguous buffer reaches past slot N·T·max(R, E/N).
pub fn check_capacity(events: &[TraceEvent], engines: &[TransferEngine], ranks: &[MoeRank]) -> CheckResult {
    let owner = rail_owner(engines);
    for r in ranks {
        let cap = r.spec().capacity();
        ensure!(r.stats().max_slot <= cap, "rank {}: slot {} over capacity {cap}", r.rank(), r.stats().max_slot);
    }
    for e in events {
        if let TraceKind::WriteApplied { at, addr, len, .. } = &e.kind {
            let Some(&d) = owner.get(at) else { continue };
            let Some(r) = ranks.get(d) else { continue };
            let (lo, hi) = r.contiguous_range();
            if *addr >= lo && *addr < hi {
                ensure!(addr + len <= hi, "write at {addr:#x}+{len} runs past the contiguous buffer of rank {d}");
            }
        }
    }
    Ok(())
}

/// `seeds` random steps on fresh ranks over `engines`, every check applied.
/// `trace` is cleared first.
pub fn grid_point(engines: &[TransferEngine], trace: &Trace, spec: &RoutingSpec, seeds: std::ops::Range<u64>) -> CheckResult {
    trace.clear();
    let mut ranks = build_ranks(engines, spec)?;
    let mut inputs = Vec::new();
    for seed in seeds {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (spec.ranks as u64) << 40 ^ (spec.experts as u64) << 32 ^ (spec.tokens as u64) << 24);
        let input = random_step(spec, &mut rng);
        let out = run_step(&mut ranks, &input).map_err(|e| format!("seed {seed}: {e}"))?;
        let packed: Vec<&Packed> = out.iter().map(|o| &o.0).collect();
        check_dispatch(spec, &input, &packed).map_err(|e| format!("seed {seed}: {e}"))?;
        let combined: Vec<&[f32]> = out.iter().map(|o| o.1.as_slice()).collect();
        check_combine(spec, &input, &combined).map_err(|e| format!("seed {seed}: {e}"))?;
        inputs.push(input);
    }
    let events = trace.snapshot();
    let engines = &engines[..spec.ranks];
    check_capacity(&events, engines, &ranks)?;
    check_write_budget(&events, engines, spec, &inputs)?;
    check_host_first(&events, engines)?;
    check_buffer_reuse(&events, engines, &ranks)?;
    Ok(())
}

fn scenario(cfg: &FaultConfig, seed: u64, spec: &RoutingSpec, steps: u64) -> CheckResult {
    let (_f, trace, engines) = cluster(cfg, seed, spec.ranks, 2);
    let r = grid_point(&engines, &trace, spec, seed..seed + steps);
    for e in engines {
        e.shutdown();
    }
    r
}

/// Every rank sends nothing; groups come back empty and the barriers still
/// complete.
fn empty_step(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let spec = RoutingSpec { ranks: 4, experts: 8, tokens: 4, topk: 2, token_bytes: 16, dim: 4, private: 2, ..RoutingSpec::default() };
    let (_f, _t, engines) = cluster(cfg, seed, 4, 1);
    let mut ranks = build_ranks(&engines, &spec)?;
    let input = StepInput { tokens: vec![vec![]; 4], routes: vec![vec![]; 4], weights: vec![vec![]; 4] };
    for _ in 0..2 {
        let out = run_step(&mut ranks, &input)?;
        for (p, c) in &out {
            ensure!(p.rows() == 0 && p.groups.iter().all(|g| g.rows == 0 && g.padded == 0), "empty step produced rows");
            ensure!(c.is_empty(), "empty step produced outputs");
        }
    }
    drop(ranks);
    for e in engines {
        e.shutdown();
    }
    Ok(())
}

/// Every (N, E, T, R) in {2,4,8}×{4,8,16}×{1..16}×{1,2,4} with `seeds`
/// steps each. Points with E not divisible by N are skipped. Returns the
/// number of points run and the failures.
pub fn equivalence_grid(cfg: &FaultConfig, seeds: u64) -> (usize, Vec<String>) {
    let mut points = 0;
    let mut failures = Vec::new();
    let mut base = 1u32 << 20;
    for n in [2usize, 4, 8] {
        let (_f, trace, engines) = cluster(cfg, n as u64, n, 2);
        for e in [4usize, 8, 16] {
            if e % n != 0 {
                continue;
            }
            for t in 1..=16usize {
                for r in [1usize, 2, 4] {
                    let spec = RoutingSpec {
                        ranks: n,
                        experts: e,
                        tokens: t,
                        topk: r,
                        token_bytes: 16,
                        dim: 4,
                        private: t / 2,
                        imm_base: base,
                        ..RoutingSpec::default()
                    };
                    base += 1024;
                    points += 1;
                    if let Err(x) = grid_point(&engines, &trace, &spec, 0..seeds) {
                        failures.push(format!("N={n} E={e} T={t} R={r}: {x}"));
                    }
                }
            }
        }
        for x in engines {
            x.shutdown();
        }
    }
    (points, failures)
}
