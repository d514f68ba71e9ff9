//! Engine-level invariants: payload fidelity, immediate atomicity and
//! exactly-once counting, rail sharding, completion durability, worker loop
//! priority, messaging.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cluster, drain_callbacks, ensure, pattern, wait, CheckResult};
use crate::trace::{PostPhase, TraceKind};
use crate::transport::sim::FaultConfig;
use crate::types::{Device, OnDone, Pages, ScatterDst};
use crate::{DeviceBuffer, DoneFlag, TransferError};

/// Runs every engine check; returns `(name, outcome)` pairs.
pub fn run_all(cfg: &FaultConfig, seed: u64) -> Vec<(&'static str, CheckResult)> {
    vec![
        ("split write fidelity", split_write(cfg, seed, 32 << 20)),
        ("paged rail balance and fidelity", paged_writes(cfg, seed)),
        ("100 reordered writes", many_writes(cfg, seed)),
        ("imm counter semantics", imm_counter(cfg, seed, 2000, 64, 4).map(|_| ())),
        ("scatter and barrier", scatter_barrier(cfg, seed)),
        ("new requests first", loop_priority(cfg, seed)),
        ("messages", messages(cfg, seed)),
        ("delivery errors", delivery_errors(cfg, seed)),
    ]
}

/// One large write on 2 rails: split across both, bytes identical, one
/// counter increment, and the increment only after every byte landed.
pub fn split_write(cfg: &FaultConfig, seed: u64, len: usize) -> CheckResult {
    let (_f, trace, e) = cluster(cfg, seed, 2, 2);
    let src = DeviceBuffer::from_bytes(&pattern(seed, len));
    let dst = DeviceBuffer::new(len);
    let (h, _) = e[0].reg_mr(&src, Device::Host).map_err(|x| x.to_string())?;
    let (_, d) = e[1].reg_mr(&dst, Device::Host).map_err(|x| x.to_string())?;
    let probe_ok = Arc::new(Mutex::new(None));
    let p = probe_ok.clone();
    let (dc, sc) = (dst.clone(), src.clone());
    e[1].expect_imm_count(
        5,
        1,
        OnDone::callback(move |r| {
            *p.lock().unwrap() = Some(r.is_ok() && dc.to_vec() == sc.to_vec());
        }),
    )
    .map_err(|x| x.to_string())?;
    let (od, flag) = OnDone::flag();
    e[0].submit_single_write(len as u64, Some(5), (h, 0), (&d, 0), od).map_err(|x| x.to_string())?;
    wait(&flag, "write completion")?;
    ensure!(dst.to_vec() == src.to_vec(), "destination differs from source when OnDone fired");
    drain_callbacks(&e[1])?;
    ensure!(*probe_ok.lock().unwrap() == Some(true), "imm callback saw an incomplete payload");
    ensure!(e[1].imm_count(5) == 1, "counter moved {} times", e[1].imm_count(5));
    let events = trace.snapshot();
    let rails: std::collections::HashSet<String> = events
        .iter()
        .filter_map(|ev| match &ev.kind {
            TraceKind::Post { from, len, .. } if *len > 0 => Some(from.clone()),
            _ => None,
        })
        .collect();
    if len > (1 << 20) {
        ensure!(rails.len() == 2, "large write used {} rails", rails.len());
    }
    let at = e[1].main_address().to_string();
    // The immediate may arrive on either rail; match it by rail prefix.
    let node = at.rsplit_once('.').unwrap().0.to_string();
    let imm_pos = events
        .iter()
        .position(|ev| matches!(&ev.kind, TraceKind::ImmDelivered { at: a, imm: 5, .. } if a.starts_with(&node)))
        .ok_or("no imm in trace")?;
    let before: u64 = events[..imm_pos]
        .iter()
        .filter_map(|ev| match &ev.kind {
            TraceKind::WriteApplied { at: a, len, .. } if a.starts_with(&node) => Some(*len),
            _ => None,
        })
        .sum();
    ensure!(before == len as u64, "only {before} of {len} bytes applied before the immediate");
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// 8 pages over 4 rails lands 2 per rail; 64 KiB pages with shuffled
/// destination slots match a plain copy.
pub fn paged_writes(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_f, trace, e) = cluster(cfg, seed, 2, 4);
    let page = 64 << 10;
    let n = 32usize;
    let src = DeviceBuffer::from_bytes(&pattern(seed ^ 1, page * n));
    let dst = DeviceBuffer::new(page * n);
    let (h, _) = e[0].reg_mr(&src, Device::Host).map_err(|x| x.to_string())?;
    let (_, d) = e[1].reg_mr(&dst, Device::Host).map_err(|x| x.to_string())?;

    let eight = Pages { indices: (0..8).collect(), stride: page as u64, offset: 0 };
    let (od, flag) = OnDone::flag();
    e[0].submit_paged_writes(page as u64, None, (h, &eight), (&d, &eight), od).map_err(|x| x.to_string())?;
    wait(&flag, "8-page write")?;
    let mut per_rail: HashMap<String, usize> = HashMap::new();
    for ev in trace.snapshot() {
        if let TraceKind::Post { from, len, .. } = ev.kind {
            if len > 0 {
                *per_rail.entry(from).or_default() += 1;
            }
        }
    }
    ensure!(per_rail.len() == 4 && per_rail.values().all(|&c| c == 2), "rail page counts {per_rail:?}");

    let mut slots: Vec<u32> = (0..n as u32).collect();
    slots.shuffle(&mut rng);
    let sp = Pages { indices: (0..n as u32).collect(), stride: page as u64, offset: 0 };
    let dp = Pages { indices: slots.clone(), stride: page as u64, offset: 0 };
    let (rod, rflag) = OnDone::flag();
    e[1].expect_imm_count(3, 1, rod).map_err(|x| x.to_string())?;
    let (od, flag) = OnDone::flag();
    e[0].submit_paged_writes(page as u64, Some(3), (h, &sp), (&d, &dp), od).map_err(|x| x.to_string())?;
    wait(&flag, "shuffled paged write")?;
    wait(&rflag, "paged imm")?;
    let s = src.to_vec();
    let mut oracle = vec![0u8; page * n];
    for (i, slot) in slots.iter().enumerate() {
        oracle[*slot as usize * page..][..page].copy_from_slice(&s[i * page..][..page]);
    }
    ensure!(dst.to_vec() == oracle, "paged destination differs from oracle");
    ensure!(e[1].imm_count(3) == 1, "paged op incremented {} times", e[1].imm_count(3));
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// One paged write of `k` small pages per entry of `ks` on `rails` rails:
/// per-rail page counts taken from the trace differ by at most one. The
/// largest `k` must be in `ks`.
pub fn paged_balance(cfg: &FaultConfig, seed: u64, rails: usize, ks: &[usize]) -> CheckResult {
    let (_f, trace, e) = cluster(cfg, seed, 2, rails);
    let page = 64usize;
    let max = ks.iter().copied().max().unwrap_or(0).max(1);
    let src = DeviceBuffer::from_bytes(&pattern(seed, page * max));
    let dst = DeviceBuffer::new(page * max);
    let (h, _) = e[0].reg_mr(&src, Device::Host).map_err(|x| x.to_string())?;
    let (_, d) = e[1].reg_mr(&dst, Device::Host).map_err(|x| x.to_string())?;
    for &k in ks {
        trace.clear();
        let pages = Pages { indices: (0..k as u32).collect(), stride: page as u64, offset: 0 };
        let (od, flag) = OnDone::flag();
        e[0].submit_paged_writes(page as u64, None, (h, &pages), (&d, &pages), od).map_err(|x| x.to_string())?;
        wait(&flag, "paged write")?;
        let mut per_rail: HashMap<String, usize> = HashMap::new();
        for ev in trace.snapshot() {
            if let TraceKind::Post { from, len, .. } = ev.kind {
                if len > 0 {
                    *per_rail.entry(from).or_default() += 1;
                }
            }
        }
        let total: usize = per_rail.values().sum();
        ensure!(total == k, "K={k}: {total} pages posted");
        let hi = per_rail.values().copied().max().unwrap_or(0);
        // Rails that carried nothing count as zero.
        let lo = if per_rail.len() < rails { 0 } else { per_rail.values().copied().min().unwrap_or(0) };
        ensure!(hi - lo <= 1, "K={k} R={rails}: rail page counts {per_rail:?}");
    }
    ensure!(dst.to_vec() == src.to_vec(), "paged destination differs from the source");
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// 100 writes to disjoint ranges posted back to back: final memory equals an
/// in-order copy and every immediate is counted exactly once.
pub fn many_writes(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let (_f, _t, e) = cluster(cfg, seed, 2, 2);
    let chunk = 3000usize;
    let src = DeviceBuffer::from_bytes(&pattern(seed ^ 2, chunk * 100));
    let dst = DeviceBuffer::new(chunk * 100);
    let (h, _) = e[0].reg_mr(&src, Device::Host).map_err(|x| x.to_string())?;
    let (_, d) = e[1].reg_mr(&dst, Device::Host).map_err(|x| x.to_string())?;
    let flags: Vec<Arc<DoneFlag>> = (0..100)
        .map(|i| {
            let (od, f) = OnDone::flag();
            let off = (i * chunk) as u64;
            e[0].submit_single_write(chunk as u64, Some(i as u32 % 7), (h, off), (&d, off), od).unwrap();
            f
        })
        .collect();
    for f in &flags {
        wait(f, "write")?;
    }
    let (rod, rflag) = OnDone::flag();
    e[1].expect_imm_count(0, 15, rod).map_err(|x| x.to_string())?;
    wait(&rflag, "imm 0 receipts")?;
    ensure!(dst.to_vec() == src.to_vec(), "final memory differs from in-order oracle");
    let total: u64 = (0..7).map(|i| e[1].imm_count(i)).sum();
    ensure!(total == 100, "{total} immediates counted for 100 writes");
    for x in e {
        x.shutdown();
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct ImmReport {
    pub writes: usize,
    pub expectations: usize,
    pub fired_once: usize,
    pub armed_late_fired_immediately: usize,
    pub incomplete_payloads: usize,
    pub premature: usize,
}

/// `writes` writes spread over `imms` immediate values across `rails` rails.
/// Half the values are armed before any traffic, half after all their
/// receipts were counted. Each expectation probes every payload of its
/// value when it fires.
pub fn imm_counter(cfg: &FaultConfig, seed: u64, writes: usize, imms: u32, rails: usize) -> Result<ImmReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1111);
    let (_f, _t, e) = cluster(cfg, seed, 2, rails);
    let chunk = 512usize;
    let src = DeviceBuffer::from_bytes(&pattern(seed ^ 3, chunk * writes));
    let dst = DeviceBuffer::new(chunk * writes);
    let (h, _) = e[0].reg_mr(&src, Device::Host).map_err(|x| x.to_string())?;
    let (_, d) = e[1].reg_mr(&dst, Device::Host).map_err(|x| x.to_string())?;
    let assign: Vec<u32> = (0..writes).map(|i| if i < imms as usize { i as u32 } else { rng.gen_range(0..imms) }).collect();
    let mut by_imm: HashMap<u32, Vec<usize>> = HashMap::new();
    for (w, &imm) in assign.iter().enumerate() {
        by_imm.entry(imm).or_default().push(w);
    }
    let by_imm = Arc::new(by_imm);
    let fires: Arc<Vec<AtomicUsize>> = Arc::new((0..imms).map(|_| AtomicUsize::new(0)).collect());
    let incomplete = Arc::new(AtomicUsize::new(0));
    let premature = Arc::new(AtomicUsize::new(0));
    let expect = |imm: u32| {
        let (fires, incomplete, premature, by_imm) = (fires.clone(), incomplete.clone(), premature.clone(), by_imm.clone());
        let (src, dst, rx) = (src.clone(), dst.clone(), e[1].clone());
        let count = by_imm[&imm].len() as u32;
        OnDone::callback(move |r| {
            if r.is_err() {
                return;
            }
            fires[imm as usize].fetch_add(1, Ordering::SeqCst);
            if rx.imm_count(imm) < count as u64 {
                premature.fetch_add(1, Ordering::SeqCst);
            }
            for &w in &by_imm[&imm] {
                if dst.read_vec(w * chunk, chunk) != src.read_vec(w * chunk, chunk) {
                    incomplete.fetch_add(1, Ordering::SeqCst);
                }
            }
        })
    };
    let late: Vec<u32> = (0..imms).filter(|i| i % 2 == 1).collect();
    for imm in (0..imms).filter(|i| i % 2 == 0) {
        e[1].expect_imm_count(imm, by_imm[&imm].len() as u32, expect(imm)).map_err(|x| x.to_string())?;
    }
    let mut order: Vec<usize> = (0..writes).collect();
    order.shuffle(&mut rng);
    let flags: Vec<Arc<DoneFlag>> = order
        .iter()
        .map(|&w| {
            let (od, f) = OnDone::flag();
            let off = (w * chunk) as u64;
            e[0].submit_single_write(chunk as u64, Some(assign[w]), (h, off), (&d, off), od).unwrap();
            f
        })
        .collect();
    for f in &flags {
        wait(f, "write")?;
    }
    let mut immediate = 0;
    for &imm in &late {
        let need = by_imm[&imm].len() as u64;
        let t0 = Instant::now();
        while e[1].imm_count(imm) < need && t0.elapsed() < super::WAIT {
            std::thread::sleep(Duration::from_millis(1));
        }
        let (od, flag) = OnDone::flag();
        e[1].expect_imm_count(imm, need as u32, od).map_err(|x| x.to_string())?;
        if flag.is_set() {
            immediate += 1;
            fires[imm as usize].fetch_add(1, Ordering::SeqCst);
            for &w in &by_imm[&imm] {
                if dst.read_vec(w * chunk, chunk) != src.read_vec(w * chunk, chunk) {
                    incomplete.fetch_add(1, Ordering::SeqCst);
                }
            }
        }
    }
    drain_callbacks(&e[1])?;
    let report = ImmReport {
        writes,
        expectations: imms as usize,
        fired_once: fires.iter().filter(|f| f.load(Ordering::SeqCst) == 1).count(),
        armed_late_fired_immediately: immediate,
        incomplete_payloads: incomplete.load(Ordering::SeqCst),
        premature: premature.load(Ordering::SeqCst),
    };
    for x in e {
        x.shutdown();
    }
    ensure!(report.fired_once == imms as usize, "{} of {imms} expectations fired exactly once", report.fired_once);
    ensure!(report.armed_late_fired_immediately == late.len(), "late arming fired immediately for {} of {}", immediate, late.len());
    ensure!(report.incomplete_payloads == 0, "{} incomplete payloads at fire time", report.incomplete_payloads);
    ensure!(report.premature == 0, "{} expectations fired below threshold", report.premature);
    Ok(report)
}

/// Scatter to 3 peers (one entry empty), then a barrier to 4 peers.
pub fn scatter_barrier(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let (_f, _t, e) = cluster(cfg, seed, 5, 2);
    let src = DeviceBuffer::from_bytes(&pattern(seed ^ 4, 3 * 4096));
    let (h, _) = e[0].reg_mr(&src, Device::Host).map_err(|x| x.to_string())?;
    let mut dbufs = Vec::new();
    let mut descs = Vec::new();
    for x in &e[1..] {
        let b = DeviceBuffer::new(8192);
        descs.push(x.reg_mr(&b, Device::Host).map_err(|x| x.to_string())?.1);
        dbufs.push(b);
    }
    let group = e[0].add_peer_group(descs[..3].iter().map(|d| d.main_addr().clone()).collect());
    let lens = [4096u64, 0, 1000];
    let dsts: Vec<ScatterDst> =
        (0..3).map(|j| ScatterDst { len: lens[j], src: j as u64 * 4096, dst: (descs[j].clone(), 100 * j as u64) }).collect();
    let flags: Vec<Arc<DoneFlag>> = (1..4)
        .map(|j| {
            let (od, f) = OnDone::flag();
            e[j].expect_imm_count(21, 1, od).unwrap();
            f
        })
        .collect();
    let (od, flag) = OnDone::flag();
    e[0].submit_scatter(group, od, Some(21), h, &dsts).map_err(|x| x.to_string())?;
    wait(&flag, "scatter")?;
    for (j, f) in flags.iter().enumerate() {
        wait(f, "scatter imm")?;
        let got = dbufs[j].read_vec(100 * j, lens[j] as usize);
        ensure!(got == src.read_vec(j * 4096, lens[j] as usize), "peer {j} slice differs");
        ensure!(e[j + 1].imm_count(21) == 1, "peer {j} counted {}", e[j + 1].imm_count(21));
    }
    ensure!(dbufs[1].to_vec().iter().all(|&b| b == 0), "empty scatter entry changed memory");
    let bad = e[0].submit_scatter(group, OnDone::Ignore, None, h, &dsts[..2]);
    ensure!(bad.is_err(), "short destination list accepted");

    let all = e[0].add_peer_group(descs.iter().map(|d| d.main_addr().clone()).collect());
    let (od, flag) = OnDone::flag();
    e[0].submit_barrier(all, od, 11, &descs).map_err(|x| x.to_string())?;
    wait(&flag, "barrier")?;
    for x in &e[1..] {
        let (od, f) = OnDone::flag();
        x.expect_imm_count(11, 1, od).map_err(|x| x.to_string())?;
        wait(&f, "barrier imm")?;
        ensure!(x.imm_count(11) == 1, "barrier counted {}", x.imm_count(11));
    }
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// Within every loop iteration of a worker, first posts of new transfers
/// precede posts of work carried over from earlier iterations.
pub fn loop_priority(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let cfg = FaultConfig { queue_depth: 16, ..cfg.clone() };
    let (_f, trace, e) = cluster(&cfg, seed, 2, 2);
    let page = 1024u64;
    let src = DeviceBuffer::from_bytes(&pattern(seed ^ 5, 64 * page as usize));
    let dst = DeviceBuffer::new(64 * page as usize);
    let (h, _) = e[0].reg_mr(&src, Device::Host).map_err(|x| x.to_string())?;
    let (_, d) = e[1].reg_mr(&dst, Device::Host).map_err(|x| x.to_string())?;
    let pages = Pages { indices: (0..64).collect(), stride: page, offset: 0 };
    let flags: Vec<Arc<DoneFlag>> = (0..40)
        .map(|_| {
            let (od, f) = OnDone::flag();
            e[0].submit_paged_writes(page, None, (h, &pages), (&d, &pages), od).unwrap();
            f
        })
        .collect();
    for f in &flags {
        wait(f, "paged write")?;
    }
    let rails: Vec<String> = e[0].group_addrs(0).iter().map(|a| a.to_string()).collect();
    let mut iteration: Vec<PostPhase> = Vec::new();
    let mut saw_mixed = false;
    for ev in trace.snapshot() {
        match ev.kind {
            TraceKind::Post { from, phase, .. } if rails.contains(&from) => iteration.push(phase),
            TraceKind::Loop { engine, .. } if engine == e[0].name() => {
                let first_carry = iteration.iter().position(|p| *p != PostPhase::New);
                if let Some(i) = first_carry {
                    ensure!(!iteration[i..].contains(&PostPhase::New), "new request posted after carried-over work: {iteration:?}");
                    saw_mixed |= i > 0;
                }
                iteration.clear();
            }
            _ => {}
        }
    }
    ensure!(dst.to_vec() == src.to_vec(), "paged copy differs");
    let _ = saw_mixed;
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// Pool of 4 receive buffers survives concurrent senders and slow handlers;
/// sending to a peer without receive buffers fails at the sender.
pub fn messages(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let (_f, _t, e) = cluster(cfg, seed, 3, 1);
    let got = Arc::new(Mutex::new(Vec::new()));
    let g = got.clone();
    e[1].submit_recvs(64, 4, move |m| {
        std::thread::sleep(Duration::from_millis(2));
        g.lock().unwrap().push(m.bytes());
    })
    .map_err(|x| x.to_string())?;
    // Receive buffers are posted asynchronously; a zero-count expectation
    // round-trips through the worker queue first.
    let (od, f) = OnDone::flag();
    let barrier_buf = DeviceBuffer::new(1);
    let (_, bd) = e[1].reg_mr(&barrier_buf, Device::Host).map_err(|x| x.to_string())?;
    let grp = e[0].add_peer_group(vec![bd.main_addr().clone()]);
    e[0].submit_barrier(grp, od, 99, std::slice::from_ref(&bd)).map_err(|x| x.to_string())?;
    wait(&f, "barrier")?;
    let to = e[1].main_address();
    let mut sent = Vec::new();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4u8)
            .map(|i| {
                let (x, to) = (e[0].clone(), to.clone());
                s.spawn(move || {
                    let (od, f) = OnDone::flag();
                    x.submit_send(&to, &[i; 64], od).unwrap();
                    f
                })
            })
            .collect();
        for h in handles {
            sent.push(h.join().unwrap());
        }
    });
    for f in &sent {
        wait(f, "concurrent send")?;
    }
    for i in 0..20u8 {
        let t0 = Instant::now();
        loop {
            let (od, f) = OnDone::flag();
            e[0].submit_send(&to, &[100 + i; 10], od).map_err(|x| x.to_string())?;
            match f.wait_timeout(super::WAIT) {
                Some(Ok(())) => break,
                // All 4 buffers may be lent out to slow handlers right now.
                Some(Err(TransferError::Delivery(_))) if t0.elapsed() < super::WAIT => {
                    std::thread::sleep(Duration::from_millis(3));
                }
                other => return Err(format!("sequential send {i}: {other:?}")),
            }
        }
    }
    let t0 = Instant::now();
    while got.lock().unwrap().len() < 24 && t0.elapsed() < super::WAIT {
        std::thread::sleep(Duration::from_millis(1));
    }
    let mut msgs = got.lock().unwrap().clone();
    ensure!(msgs.len() == 24, "{} of 24 messages delivered", msgs.len());
    msgs.sort();
    for i in 0..4u8 {
        ensure!(msgs.contains(&vec![i; 64]), "message {i} missing or altered");
    }
    let (od, f) = OnDone::flag();
    e[0].submit_send(&e[2].main_address(), b"nobody listens", od).map_err(|x| x.to_string())?;
    ensure!(matches!(f.wait_timeout(super::WAIT), Some(Err(_))), "send without posted receives succeeded");
    for x in e {
        x.shutdown();
    }
    Ok(())
}

/// Writes to a deregistered region complete with an error and never bump a
/// counter; short counts never fire.
pub fn delivery_errors(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let (_f, _t, e) = cluster(cfg, seed, 2, 1);
    let src = DeviceBuffer::new(256);
    let dst = DeviceBuffer::new(256);
    let (h, _) = e[0].reg_mr(&src, Device::Host).map_err(|x| x.to_string())?;
    let (dh, d) = e[1].reg_mr(&dst, Device::Host).map_err(|x| x.to_string())?;
    let (rod, rflag) = OnDone::flag();
    e[1].expect_imm_count(8, 3, rod).map_err(|x| x.to_string())?;
    for _ in 0..2 {
        let (od, f) = OnDone::flag();
        e[0].submit_single_write(256, Some(8), (h, 0), (&d, 0), od).map_err(|x| x.to_string())?;
        wait(&f, "write")?;
    }
    e[1].dereg_mr(dh).map_err(|x| x.to_string())?;
    // Make sure the deregistration reached the worker before writing again.
    let (od, f) = OnDone::flag();
    let probe = DeviceBuffer::new(1);
    let (_, pd) = e[1].reg_mr(&probe, Device::Host).map_err(|x| x.to_string())?;
    e[0].submit_single_write(0, Some(77), (h, 0), (&pd, 0), od).map_err(|x| x.to_string())?;
    wait(&f, "probe")?;
    let (od, f) = OnDone::flag();
    e[0].submit_single_write(256, Some(8), (h, 0), (&d, 0), od).map_err(|x| x.to_string())?;
    ensure!(matches!(f.wait_timeout(super::WAIT), Some(Err(TransferError::Delivery(_)))), "write to deregistered region succeeded");
    std::thread::sleep(Duration::from_millis(20));
    ensure!(!rflag.is_set(), "expectation fired with 2 of 3 receipts");
    ensure!(e[1].imm_count(8) == 2, "counter is {}", e[1].imm_count(8));
    for x in e {
        x.shutdown();
    }
    Ok(())
}
