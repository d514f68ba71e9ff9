use std::sync::Arc;

use transfer_engine::bench::{bench_moe, bench_p2p, private_sweep, MoeBenchConfig, P2pConfig, SweepPoint};
use transfer_engine::moe::RoutingSpec;
use transfer_engine::transport::sim::SimFabric;
use transfer_engine::{Trace, TraceEvent};

fn p2p(seed: u64) -> transfer_engine::bench::P2pReport {
    let cfg = P2pConfig::default();
    bench_p2p(&*SimFabric::new(cfg.sim_fabric(), seed), &cfg).unwrap()
}

#[test]
fn throughput_respects_the_line_rate_and_grows_with_size() {
    let r = p2p(1);
    let line = r.line_rate_bytes_per_sec.unwrap() as f64;
    for row in &r.rows {
        assert!(row.bytes_per_sec <= line * 1.0001, "{row:?} above the cap");
    }
    let single: Vec<f64> = [64 << 10, 256 << 10, 1 << 20, 32 << 20].iter().map(|&s| r.row("single", s).unwrap().bytes_per_sec).collect();
    assert!(single.windows(2).all(|w| w[1] >= w[0]), "{single:?}");
    let peak = single.iter().cloned().fold(0.0, f64::max);
    let paged = r.row("paged", 64 << 10).unwrap().bytes_per_sec;
    assert!(paged >= 0.9 * peak, "paged {paged} vs peak {peak}");
}

#[test]
fn reports_are_deterministic_per_seed() {
    let a = serde_json::to_string(&p2p(5)).unwrap();
    assert_eq!(a, serde_json::to_string(&p2p(5)).unwrap());
    let cfg = MoeBenchConfig { warmup: 2, iters: 10, seed: 9, ..small_moe() };
    let x = serde_json::to_string(&bench_moe(&cfg).unwrap()).unwrap();
    assert_eq!(x, serde_json::to_string(&bench_moe(&cfg).unwrap()).unwrap());
}

fn small_moe() -> MoeBenchConfig {
    MoeBenchConfig {
        spec: RoutingSpec { ranks: 4, experts: 8, tokens: 16, topk: 2, ..RoutingSpec::default() },
        warmup: 5,
        iters: 50,
        ..MoeBenchConfig::default()
    }
}

#[test]
fn single_rank_moe_needs_no_network() {
    let cfg = MoeBenchConfig {
        spec: RoutingSpec { ranks: 1, experts: 4, tokens: 8, topk: 2, private: 8, ..RoutingSpec::default() },
        warmup: 1,
        iters: 5,
        ..MoeBenchConfig::default()
    };
    let r = bench_moe(&cfg).unwrap();
    assert_eq!(r.network_writes, 0);
    assert_eq!(r.samples, 5);
    assert_eq!(r.phases.len(), 6);
}

/// Median dispatch latency never grows (within 1%) as P grows, and P=0 is
/// strictly slower than P=T.
pub fn sweep_is_monotone(points: &[SweepPoint]) -> Result<(), String> {
    for w in points.windows(2) {
        if w[1].dispatch.p50 > w[0].dispatch.p50 * 1.01 {
            return Err(format!("P={} {} us > P={} {} us", w[1].private, w[1].dispatch.p50, w[0].private, w[0].dispatch.p50));
        }
    }
    let (first, last) = (points.first().unwrap(), points.last().unwrap());
    if first.dispatch.p50 <= last.dispatch.p50 {
        return Err(format!("P=0 {} us not slower than P={} {} us", first.dispatch.p50, last.private, last.dispatch.p50));
    }
    Ok(())
}

#[test]
fn private_buffer_sweep_is_non_increasing() {
    let points = private_sweep(&small_moe(), &[0, 1, 2, 4, 8, 12, 16]).unwrap();
    sweep_is_monotone(&points).unwrap();
}

#[test]
fn trace_export_is_valid_json_lines() {
    let trace = Arc::new(Trace::new());
    bench_moe(&MoeBenchConfig { warmup: 0, iters: 2, trace: Some(trace.clone()), ..small_moe() }).unwrap();
    let mut out = Vec::new();
    trace.write_jsonl(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut last = (0, 0);
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["seq", "t_ns", "vt", "type"] {
            assert!(v.get(key).is_some(), "line {i} lacks {key}: {line}");
        }
        let e: TraceEvent = serde_json::from_value(v).unwrap();
        assert_eq!(e.seq, i as u64);
        assert!(e.t_ns >= last.1 && (i == 0 || e.seq > last.0));
        last = (e.seq, e.t_ns);
        n += 1;
    }
    assert!(n > 0);
}
