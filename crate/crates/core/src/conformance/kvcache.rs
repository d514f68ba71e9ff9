//! KV transfer invariants: page and context fidelity, no decode before the
//! last write, cancellation safety, heartbeat timeouts.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use super::{cluster, ensure, CheckResult};
use crate::kvcache::{context_byte, gqa_slices, kv_byte, Decoder, HeadSlice, KvConfig, KvOutcome, KvRequest, PrefillTarget, Prefiller};
use crate::trace::{TraceEvent, TraceKind};
use crate::transport::sim::FaultConfig;
use crate::TransferEngine;

pub fn run_all(cfg: &FaultConfig, seed: u64) -> Vec<(&'static str, CheckResult)> {
    vec![
        ("kv fidelity and decode ordering", fidelity(cfg, seed)),
        ("kv gqa head slices", gqa(cfg, seed)),
        ("kv cancellation safety", cancellation(cfg, seed)),
        ("kv prefiller failure", prefiller_failure(cfg, seed)),
    ]
}

fn small() -> KvConfig {
    KvConfig {
        layers: 4,
        page_bytes: 4096,
        pages: 32,
        context_bytes: 256,
        max_requests: 8,
        heartbeat: Duration::from_millis(20),
        ..KvConfig::default()
    }
}

fn rail_names(e: &TransferEngine) -> HashSet<String> {
    (0..e.groups()).flat_map(|g| e.group_addrs(g).iter().map(|a| a.to_string())).collect()
}

fn in_ranges(addr: u64, len: u64, ranges: &[(u64, u64)]) -> bool {
    ranges.iter().any(|&(lo, hi)| addr < hi && addr + len > lo)
}

fn mark_pos(events: &[TraceEvent], label: &str, id: u64) -> Option<usize> {
    events.iter().position(|e| matches!(&e.kind, TraceKind::Mark { label: l, value, .. } if l == label && *value == id))
}

/// Bytes landed in `ranges` at `rails` before the decode start mark of
/// `id` must equal `expected`, and nothing lands there afterwards.
pub fn check_decode_order(events: &[TraceEvent], rails: &HashSet<String>, id: u64, ranges: &[(u64, u64)], expected: u64) -> CheckResult {
    let pos = mark_pos(events, "decode_start", id).ok_or(format!("request {id} never started decoding"))?;
    let mut before = 0;
    for (i, e) in events.iter().enumerate() {
        if let TraceKind::WriteApplied { at, addr, len, .. } = &e.kind {
            if rails.contains(at) && in_ranges(*addr, *len, ranges) {
                ensure!(i < pos, "request {id}: write at {addr:#x} landed after decoding started");
                before += len;
            }
        }
    }
    ensure!(before == expected, "request {id}: {before} of {expected} page bytes landed before decoding started");
    Ok(())
}

/// No write lands in `ranges` after the cancellation of `id` was confirmed.
pub fn check_cancel_quiet(events: &[TraceEvent], rails: &HashSet<String>, id: u64, ranges: &[(u64, u64)]) -> Result<usize, String> {
    let pos = mark_pos(events, "cancel_confirmed", id).ok_or(format!("request {id}: no confirmation in trace"))?;
    ensure!(mark_pos(events, "decode_start", id).is_none(), "cancelled request {id} started decoding");
    let late = events[pos..]
        .iter()
        .filter(
            |e| matches!(&e.kind, TraceKind::WriteApplied { at, addr, len, .. } if rails.contains(at) && in_ranges(*addr, *len, ranges)),
        )
        .count();
    ensure!(late == 0, "request {id}: {late} writes after cancellation was confirmed");
    let early = events[..pos]
        .iter()
        .filter(
            |e| matches!(&e.kind, TraceKind::WriteApplied { at, addr, len, .. } if rails.contains(at) && in_ranges(*addr, *len, ranges)),
        )
        .count();
    Ok(early)
}

/// Compares every page and the context with what a single full-head
/// prefiller produces for this request.
pub fn check_pages(dec: &Decoder, req: &KvRequest, context: bool) -> CheckResult {
    let cfg = dec.config();
    for layer in 0..cfg.layers {
        for (pos, &p) in req.pages.iter().enumerate() {
            let got = dec.page(layer, p);
            let want: Vec<u8> = (0..cfg.page_bytes).map(|b| kv_byte(req.id, layer, pos as u32, b)).collect();
            if got != want {
                let first = got.iter().zip(&want).position(|(a, b)| a != b).unwrap();
                return Err(format!("request {}: layer {layer} page {pos} differs at byte {first}", req.id));
            }
        }
    }
    if context {
        let slot = req.context_slot.ok_or("no context slot")?;
        let got = dec.context(slot, cfg.context_bytes);
        let want: Vec<u8> = (0..cfg.context_bytes).map(|i| context_byte(req.id, i)).collect();
        ensure!(got == want, "request {}: context differs", req.id);
    }
    Ok(())
}

fn ready(req: &KvRequest) -> CheckResult {
    match req.wait(super::WAIT) {
        Some(KvOutcome::Ready { .. }) => Ok(()),
        other => Err(format!("request {}: {other:?}", req.id)),
    }
}

/// Three concurrent requests over chunked prefill into a small pool.
pub fn fidelity(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let kv = small();
    let (_f, trace, e) = cluster(cfg, seed, 2, 2);
    let pre = Prefiller::new(e[0].clone(), kv.clone(), HeadSlice::full(kv.page_bytes)).map_err(|x| x.to_string())?;
    let dec = Decoder::new(e[1].clone(), kv.clone()).map_err(|x| x.to_string())?;
    let target = PrefillTarget { addr: e[0].main_address(), slice: HeadSlice::full(kv.page_bytes), context: true };
    let reqs: Vec<KvRequest> = [(5u32, 3u32), (8, 4), (1, 1)]
        .iter()
        .map(|&(pages, chunks)| dec.dispatch(pages * 16, pages, chunks, vec![target.clone()]))
        .collect::<Result<_, _>>()
        .map_err(|x| x.to_string())?;
    for r in &reqs {
        ready(r)?;
        check_pages(&dec, r, true)?;
    }
    let events = trace.snapshot();
    let rails = rail_names(&e[1]);
    for r in &reqs {
        let expected = kv.layers as u64 * r.pages.len() as u64 * kv.page_bytes;
        check_decode_order(&events, &rails, r.id, &dec.page_ranges(r), expected)?;
    }
    let writes: u64 = [3u64, 4, 1].iter().map(|c| c * kv.layers as u64 + 1).sum();
    ensure!(pre.stats().writes == writes, "prefiller issued {} transfers, expected {writes}", pre.stats().writes);
    // Pages go back to the pool and can be reused.
    for r in &reqs {
        dec.release(r);
    }
    let again = dec.dispatch(32, 32, 2, vec![target]).map_err(|x| x.to_string())?;
    ready(&again)?;
    check_pages(&dec, &again, true)?;
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// Two prefillers each holding half the heads fill one decoder's pages.
pub fn gqa(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let kv = KvConfig { page_bytes: 8 * 512, ..small() };
    let (_f, trace, e) = cluster(cfg, seed, 3, 2);
    let slices = gqa_slices(8, 512, 2);
    let p0 = Prefiller::new(e[0].clone(), kv.clone(), slices[0]).map_err(|x| x.to_string())?;
    let p1 = Prefiller::new(e[1].clone(), kv.clone(), slices[1]).map_err(|x| x.to_string())?;
    let dec = Decoder::new(e[2].clone(), kv.clone()).map_err(|x| x.to_string())?;
    let targets = vec![
        PrefillTarget { addr: e[0].main_address(), slice: slices[0], context: true },
        PrefillTarget { addr: e[1].main_address(), slice: slices[1], context: false },
    ];
    let r = dec.dispatch(100, 7, 2, targets).map_err(|x| x.to_string())?;
    ready(&r)?;
    check_pages(&dec, &r, true)?;
    let expected = kv.layers as u64 * 7 * kv.page_bytes;
    check_decode_order(&trace.snapshot(), &rail_names(&e[2]), r.id, &dec.page_ranges(&r), expected)?;
    ensure!(p0.stats().writes == 2 * 4 + 1 && p1.stats().writes == 2 * 4, "transfer counts {:?} {:?}", p0.stats(), p1.stats());
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// Cancels a slow prefill midway: confirmation arrives, nothing lands
/// afterwards, decoding never starts.
pub fn cancellation(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let kv = KvConfig { layer_time: Duration::from_millis(3), ..small() };
    let (_f, trace, e) = cluster(cfg, seed, 2, 2);
    let pre = Prefiller::new(e[0].clone(), kv.clone(), HeadSlice::full(kv.page_bytes)).map_err(|x| x.to_string())?;
    let dec = Decoder::new(e[1].clone(), kv.clone()).map_err(|x| x.to_string())?;
    let target = PrefillTarget { addr: e[0].main_address(), slice: HeadSlice::full(kv.page_bytes), context: true };
    let r = dec.dispatch(64, 8, 4, vec![target]).map_err(|x| x.to_string())?;
    let t0 = Instant::now();
    while pre.stats().writes < 3 && t0.elapsed() < super::WAIT {
        std::thread::sleep(Duration::from_millis(1));
    }
    dec.cancel(&r);
    match r.wait(super::WAIT) {
        Some(KvOutcome::Cancelled) => {}
        other => return Err(format!("cancel resolved to {other:?}")),
    }
    // Give a misbehaving prefiller the chance to write late.
    std::thread::sleep(Duration::from_millis(50));
    let early = check_cancel_quiet(&trace.snapshot(), &rail_names(&e[1]), r.id, &dec.page_ranges(&r))?;
    ensure!(early > 0, "cancellation happened before any page landed; test did not exercise mid-transfer cancel");
    ensure!(pre.stats().cancelled == 1, "prefiller stats {:?}", pre.stats());
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// A prefiller dies mid-request: the decoder times out after the missed
/// heartbeats and frees the request.
pub fn prefiller_failure(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let kv = KvConfig { layer_time: Duration::from_millis(5), ..small() };
    let (fabric, _t, e) = cluster(cfg, seed, 2, 1);
    let _pre = Prefiller::new(e[0].clone(), kv.clone(), HeadSlice::full(kv.page_bytes)).map_err(|x| x.to_string())?;
    let dec = Decoder::new(e[1].clone(), kv.clone()).map_err(|x| x.to_string())?;
    let target = PrefillTarget { addr: e[0].main_address(), slice: HeadSlice::full(kv.page_bytes), context: true };
    let r = dec.dispatch(64, 8, 4, vec![target]).map_err(|x| x.to_string())?;
    std::thread::sleep(Duration::from_millis(15));
    let (node, _) = e[0].main_address().as_sim().ok_or("not a sim address")?;
    fabric.kill(node);
    let killed = Instant::now();
    match r.wait(super::WAIT) {
        Some(KvOutcome::TimedOut) => {}
        other => return Err(format!("dead prefiller resolved to {other:?}")),
    }
    let took = killed.elapsed();
    ensure!(took >= kv.heartbeat_timeout() / 2, "timed out after only {took:?}");
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// Decoder half of a prefiller/decoder pair on any transport: a few
/// chunked requests checked for fidelity and decode ordering, then one
/// request cancelled after its first page landed. `trace` must be the
/// decoder's. The prefiller should run with a nonzero `layer_time` so the
/// cancellation lands mid-transfer.
pub fn decoder_session(dec: &Decoder, trace: &crate::Trace, target: &PrefillTarget, chunks: u32) -> Vec<(&'static str, CheckResult)> {
    let rails = rail_names(dec.engine());
    let cfg = dec.config().clone();
    let fidelity = || -> CheckResult {
        let reqs: Vec<KvRequest> = [16u32, 8, 4]
            .iter()
            .map(|&pages| dec.dispatch(pages * 16, pages, chunks, vec![target.clone()]))
            .collect::<Result<_, _>>()
            .map_err(|x| x.to_string())?;
        for r in &reqs {
            ready(r)?;
            check_pages(dec, r, target.context)?;
        }
        let events = trace.snapshot();
        for r in &reqs {
            let expected = cfg.layers as u64 * r.pages.len() as u64 * cfg.page_bytes;
            check_decode_order(&events, &rails, r.id, &dec.page_ranges(r), expected)?;
            dec.release(r);
        }
        Ok(())
    };
    let cancel = || -> CheckResult {
        let pages = cfg.pages.min(32);
        let r = dec.dispatch(pages * 16, pages, chunks, vec![target.clone()]).map_err(|x| x.to_string())?;
        let ranges = dec.page_ranges(&r);
        let t0 = Instant::now();
        let landed = || {
            trace.snapshot().iter().any(|e| matches!(&e.kind, TraceKind::WriteApplied { at, addr, len, .. } if rails.contains(at) && in_ranges(*addr, *len, &ranges)))
        };
        while !landed() {
            ensure!(t0.elapsed() < super::WAIT, "no page landed");
            std::thread::sleep(Duration::from_micros(200));
        }
        dec.cancel(&r);
        match r.wait(super::WAIT) {
            Some(KvOutcome::Cancelled) => {}
            other => return Err(format!("cancel resolved to {other:?}")),
        }
        // A misbehaving prefiller would write late.
        std::thread::sleep(Duration::from_millis(100));
        let early = check_cancel_quiet(&trace.snapshot(), &rails, r.id, &ranges)?;
        ensure!(early > 0, "no write landed before the cancellation");
        Ok(())
    };
    vec![("kv fidelity and decode ordering", fidelity()), ("kv cancellation safety", cancel())]
}
