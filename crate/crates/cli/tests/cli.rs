use std::path::PathBuf;
use std::process::Command;

fn tebench(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tebench")).args(args).output().unwrap();
    assert!(out.status.success(), "tebench {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tmp(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("tebench-{}-{name}", std::process::id()))
}

fn json(path: &PathBuf) -> serde_json::Value {
    let v = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    let _ = std::fs::remove_file(path);
    v
}

#[test]
fn p2p_reports_every_size() {
    let out = tmp("p2p.json");
    tebench(&["p2p", "--msg-sizes", "64K,1M", "--page-sizes", "8K", "--iters", "2", "--out", out.to_str().unwrap()]);
    let v = json(&out);
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn moebench_writes_percentiles_and_sweep() {
    let out = tmp("moe.json");
    let trace = tmp("moe.jsonl");
    let args = ["moebench", "--ranks", "2", "--experts", "4", "--tokens", "8", "--topk", "2", "--warmup", "2", "--iters", "10"];
    let mut args: Vec<&str> = args.to_vec();
    args.extend(["--sweep", "0,8", "--out", out.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
    tebench(&args);
    let v = json(&out);
    assert_eq!(v["run"]["samples"], 20);
    assert_eq!(v["sweep"].as_array().unwrap().len(), 2);
    let lines = std::fs::read_to_string(&trace).unwrap();
    let _ = std::fs::remove_file(&trace);
    assert!(lines.lines().count() > 0);
}

#[test]
fn wtransfer_moves_and_verifies_weights() {
    let out = tmp("wt.json");
    let sched = tmp("wt.jsonl");
    tebench(&[
        "wtransfer",
        "--train-ranks",
        "2",
        "--infer-ranks",
        "2",
        "--params",
        "8",
        "--out",
        out.to_str().unwrap(),
        "--schedule-out",
        sched.to_str().unwrap(),
    ]);
    let v = json(&out);
    let tasks = v["tasks"].as_u64().unwrap();
    assert_eq!(std::fs::read_to_string(&sched).unwrap().lines().count() as u64, tasks);
    let _ = std::fs::remove_file(&sched);
    let workers = v["workers"].as_array().unwrap();
    assert_eq!(workers.len(), 4);
    assert!(workers.iter().all(|w| w["error"].is_null()));
    let done: u64 = workers.iter().filter_map(|w| w["step"]["tasks"].as_u64()).sum();
    assert_eq!(done, tasks);
    for w in workers.iter().filter(|w| !w["step"].is_null()) {
        assert!(w["step"]["peak_inflight"].as_u64().unwrap() <= v["watermark"].as_u64().unwrap());
    }
}

#[test]
fn socket_transport_is_rejected_for_moebench() {
    let out = Command::new(env!("CARGO_BIN_EXE_tebench")).args(["moebench", "--transport", "socket"]).output().unwrap();
    assert!(!out.status.success());
}
