//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach stdout; exits non-zero on any FAIL.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transfer_engine::bench::{bench_p2p, private_sweep, MoeBenchConfig, P2pConfig};
use transfer_engine::conformance::moe::COMBINE_TOL;
use transfer_engine::conformance::{engine, kvcache, moe, weights};
use transfer_engine::engine::shard::page_rails;
use transfer_engine::moe::RoutingSpec;
use transfer_engine::transport::sim::{FabricMode, SimFabric};
use transfer_engine::weights::tensor::f32_to_bf16;
use transfer_engine::weights::{build_schedule, prepare, DType, ParamMeta, Prepare, Sharding};

const SEEDS: [u64; 3] = [1, 7, 42];
const SUITE_BUDGET: Duration = Duration::from_secs(300);
const KV_BUDGET: Duration = Duration::from_secs(30);
const PIPELINE_STAGE: Duration = Duration::from_millis(10);
const PIPELINE_BUDGET: Duration = Duration::from_millis(200);
const PAGED_FRACTION: f64 = 0.9;
/// Relative slack when comparing successive sweep medians.
const SWEEP_SLACK: f64 = 0.01;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unordered_delivery() -> Outcome {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut checks = 0;
    for mode in FabricMode::ALL {
        let cfg = mode.config();
        for seed in SEEDS {
            let results =
                [engine::run_all(&cfg, seed), kvcache::run_all(&cfg, seed), weights::run_all(&cfg, seed), moe::run_all(&cfg, seed)];
            for (name, r) in results.into_iter().flatten() {
                checks += 1;
                if let Err(e) = r {
                    failures.push(format!("{mode:?}/{seed}/{name}: {e}"));
                }
            }
        }
    }
    let took = t0.elapsed();
    ensure(failures.is_empty(), || failures.join("; "))?;
    ensure(took < SUITE_BUDGET, || format!("took {took:?}, budget {SUITE_BUDGET:?}"))?;
    Ok(format!("{checks} checks over 4 modes x 3 seeds in {:.1} s", took.as_secs_f64()))
}

fn imm_counter() -> Outcome {
    let r = engine::imm_counter(&FabricMode::WindowRandom.config(), 3, 10_000, 256, 4)?;
    ensure(r.writes == 10_000 && r.expectations == 256, || format!("{r:?}"))?;
    ensure(r.fired_once == 256, || format!("{} of 256 expectations fired exactly once", r.fired_once))?;
    ensure(r.armed_late_fired_immediately == 128, || format!("{} of 128 late arms fired at once", r.armed_late_fired_immediately))?;
    ensure(r.incomplete_payloads == 0 && r.premature == 0, || format!("{r:?}"))?;
    Ok("10000 writes, 256 imms, 4 rails: every expectation fired once, no incomplete payload".into())
}

fn sharding_balance() -> Outcome {
    for rails in [1usize, 2, 4] {
        for k in 0..=1024usize {
            for start in 0..rails {
                let mut counts = vec![0usize; rails];
                for r in page_rails(k, rails, start) {
                    counts[r] += 1;
                }
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                ensure(hi - lo <= 1, || format!("K={k} R={rails} start={start}: {counts:?}"))?;
            }
        }
        // The same property through the engine, read back from the trace.
        let ks: Vec<usize> = (1..=1024).collect();
        engine::paged_balance(&FabricMode::WindowRandom.config(), rails as u64, rails, &ks)?;
    }
    Ok("K in 0..=1024, R in {1,2,4}: per-rail counts within 1 (assignment and engine trace)".into())
}

fn kv_fidelity() -> Outcome {
    let out = std::env::temp_dir().join(format!("acceptance-kv-{}.json", std::process::id()));
    let t0 = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_tebench"))
        .args(["kvdemo", "--layers", "8", "--chunks", "4", "--page-kib", "64", "--out"])
        .arg(&out)
        .output()
        .map_err(|e| format!("running tebench: {e}"))?;
    let took = t0.elapsed();
    let report: serde_json::Value = std::fs::read(&out)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .ok_or_else(|| format!("no report; stderr: {}", String::from_utf8_lossy(&status.stderr)))?;
    let _ = std::fs::remove_file(&out);
    let checks = report["checks"].as_array().cloned().unwrap_or_default();
    ensure(checks.len() >= 3, || format!("only {} checks reported", checks.len()))?;
    for c in &checks {
        ensure(c["ok"] == true, || format!("{}: {}", c["name"], c["detail"]))?;
    }
    ensure(status.status.success(), || format!("tebench exited with {}", status.status))?;
    ensure(took < KV_BUDGET, || format!("took {took:?}, budget {KV_BUDGET:?}"))?;
    Ok(format!("2 processes over UDP, {} checks passed in {:.1} s", checks.len(), took.as_secs_f64()))
}

fn weight_transfer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let params = rng.gen_range(1..=64);
        let groups = rng.gen_range(1..=2);
        let (train, infer) = weights::random_metas(&mut rng, params, 8, 4, groups);
        let s = build_schedule(&train, &infer).map_err(|e| format!("trial {trial}: {e}"))?;
        weights::check_coverage(&train, &infer, &s).map_err(|e| format!("trial {trial}: {e}"))?;
    }
    let wall = weights::pipelined_step(PIPELINE_STAGE)?;
    ensure(wall < PIPELINE_BUDGET, || format!("pipelined step took {wall:?}"))?;
    // Each trial checks the traced in-flight peak against its watermark.
    for seed in 0..10 {
        weights::fidelity(&FabricMode::WindowRandom.config(), seed).map_err(|e| format!("watermark trial {seed}: {e}"))?;
    }
    weights::sequential_watermark(&FabricMode::InOrder.config(), 1)?;
    let meta = ParamMeta {
        rank: 0,
        name: "w".into(),
        shape: vec![64, 64],
        dtype: DType::Bf16,
        sharding: Sharding::whole(0),
        offload: false,
        fused_from: vec![],
    };
    let train = [(meta.name.clone(), meta)].into_iter().collect();
    let prep = Prepare { sources: vec!["w".into()], shape: vec![64, 64], axis: 0, index: 0, count: 1, dtype: DType::Fp8 };
    for _ in 0..8 {
        let vals: Vec<u8> =
            (0..64 * 64).flat_map(|_| f32_to_bf16(rng.gen_range(-3.0f32..3.0) * 2f32.powi(rng.gen_range(-12..4))).to_le_bytes()).collect();
        let got = prepare(&prep, &train, &vec![vec![vals.clone()]]).map_err(|e| e.to_string())?;
        let want = weights::reference_fp8(&vals);
        let diffs = got.iter().zip(&want).filter(|(a, b)| a != b).count();
        ensure(got.len() == want.len() && diffs == 0, || format!("fp8 differs from the reference in {diffs} bytes"))?;
    }
    Ok(format!("100 coverage trials exact; pipelined step {:.0} ms; watermark held; fp8 exact", wall.as_secs_f64() * 1e3))
}

fn moe_equivalence() -> Outcome {
    let t0 = Instant::now();
    let (points, failures) = moe::equivalence_grid(&FabricMode::WindowRandom.config(), 20);
    ensure(failures.is_empty(), || failures.join("; "))?;
    ensure(points == 384, || format!("{points} grid points"))?;
    Ok(format!(
        "{points} points x 20 seeds: dispatch exact, combine within {COMBINE_TOL:e}, capacity and write budget held ({:.1} s)",
        t0.elapsed().as_secs_f64()
    ))
}

fn throughput_trend() -> Outcome {
    let cfg = P2pConfig::default();
    let r = bench_p2p(&*SimFabric::new(cfg.sim_fabric(), 1), &cfg).map_err(|e| e.to_string())?;
    let single: Vec<f64> = cfg.single_sizes.iter().map(|&s| r.row("single", s).map(|x| x.bytes_per_sec).unwrap_or(0.0)).collect();
    ensure(single.windows(2).all(|w| w[1] >= w[0]), || format!("single writes not non-decreasing: {single:?}"))?;
    let peak = single.iter().cloned().fold(0.0, f64::max);
    let paged = r.row("paged", 64 << 10).ok_or("no 64 KiB paged row")?.bytes_per_sec;
    ensure(paged >= PAGED_FRACTION * peak, || format!("paged 64 KiB {paged:.3e} B/s vs peak {peak:.3e}"))?;
    Ok(format!("single non-decreasing; paged 64 KiB at {:.1}% of single peak", 100.0 * paged / peak))
}

fn private_buffer_sweep() -> Outcome {
    let cfg = MoeBenchConfig {
        spec: RoutingSpec { ranks: 4, experts: 8, tokens: 16, topk: 2, ..RoutingSpec::default() },
        warmup: 5,
        iters: 50,
        ..MoeBenchConfig::default()
    };
    ensure(cfg.fabric.latency_min_ns > 0, || "route exchange has zero latency".into())?;
    let points = private_sweep(&cfg, &[0, 1, 2, 4, 8, 12, 16]).map_err(|e| e.to_string())?;
    for w in points.windows(2) {
        ensure(w[1].dispatch.p50 <= w[0].dispatch.p50 * (1.0 + SWEEP_SLACK), || {
            format!("P={} {:.2} us > P={} {:.2} us", w[1].private, w[1].dispatch.p50, w[0].private, w[0].dispatch.p50)
        })?;
    }
    let (first, last) = (&points[0], &points[points.len() - 1]);
    ensure(first.dispatch.p50 > last.dispatch.p50, || {
        format!("P=0 {:.2} us vs saturated {:.2} us", first.dispatch.p50, last.dispatch.p50)
    })?;
    Ok(format!("p50 {:.2} us at P=0 down to {:.2} us at P={}", first.dispatch.p50, last.dispatch.p50, last.private))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("unordered-delivery soundness", unordered_delivery),
        ("imm counter semantics", imm_counter),
        ("sharding balance", sharding_balance),
        ("kv cache fidelity", kv_fidelity),
        ("weight transfer", weight_transfer),
        ("moe equivalence", moe_equivalence),
        ("throughput trend", throughput_trend),
        ("private-buffer sweep", private_buffer_sweep),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name}: {e}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
