use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use transfer_engine::bootstrap::{Bootstrap, Rendezvous};
use transfer_engine::conformance::kvcache::decoder_session;
use transfer_engine::kvcache::{Decoder, HeadSlice, KvConfig, PrefillStats, PrefillTarget, Prefiller};
use transfer_engine::transport::socket::{SocketConfig, UdpTransport};
use transfer_engine::wire::Wire;
use transfer_engine::{EngineConfig, NetAddr, Trace, TransferEngine};

use crate::{bootstrap_arg, path_arg, spawn_self, wait_children, write_json};

const CONNECT: Duration = Duration::from_secs(20);

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Role {
    Prefiller,
    Decoder,
}

#[derive(Args, Debug)]
pub struct KvArgs {
    #[arg(long, default_value_t = 8)]
    layers: u32,
    /// Prefill chunks per request.
    #[arg(long, default_value_t = 4)]
    chunks: u32,
    #[arg(long, default_value_t = 64)]
    page_kib: u64,
    /// Pages per layer in the decoder's pool.
    #[arg(long, default_value_t = 64)]
    pages: u32,
    /// Simulated prefill compute per (chunk, layer).
    #[arg(long, default_value_t = 2)]
    layer_ms: u64,
    #[arg(long, default_value_t = 2)]
    rails: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, hide = true)]
    role: Option<Role>,
    #[arg(long, hide = true)]
    bootstrap: Option<SocketAddr>,
    #[arg(long, hide = true)]
    report: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KvReport {
    pub layers: u32,
    pub chunks: u32,
    pub page_bytes: u64,
    pub checks: Vec<Check>,
    pub prefiller: PrefillStats,
    /// Wall time of the whole two-process run, filled in by the parent.
    pub wall_ms: f64,
}

impl KvArgs {
    fn config(&self) -> KvConfig {
        KvConfig {
            layers: self.layers,
            page_bytes: self.page_kib << 10,
            pages: self.pages,
            layer_time: Duration::from_millis(self.layer_ms),
            ..KvConfig::default()
        }
    }

    fn worker_args(&self, role: &str, addr: SocketAddr) -> Vec<String> {
        let mut v: Vec<String> = vec!["kvdemo".into(), "--role".into(), role.into()];
        v.extend(bootstrap_arg(addr));
        for (flag, val) in [
            ("--layers", self.layers.to_string()),
            ("--chunks", self.chunks.to_string()),
            ("--page-kib", self.page_kib.to_string()),
            ("--pages", self.pages.to_string()),
            ("--layer-ms", self.layer_ms.to_string()),
            ("--rails", self.rails.to_string()),
            ("--seed", self.seed.to_string()),
        ] {
            v.push(flag.into());
            v.push(val);
        }
        v
    }
}

pub fn run(a: KvArgs) -> Result<()> {
    match a.role {
        Some(Role::Prefiller) => prefiller(&a),
        Some(Role::Decoder) => decoder(&a),
        None => parent(&a),
    }
}

fn parent(a: &KvArgs) -> Result<()> {
    let t0 = Instant::now();
    let rv = Rendezvous::bind("127.0.0.1:0")?;
    let report_path = std::env::temp_dir().join(format!("tebench-kv-{}.json", std::process::id()));
    let _ = std::fs::remove_file(&report_path);
    let pre = spawn_self(&a.worker_args("prefiller", rv.local_addr()))?;
    let mut dargs = a.worker_args("decoder", rv.local_addr());
    dargs.extend(path_arg("--report", &report_path));
    let dec = spawn_self(&dargs)?;
    wait_children(vec![("prefiller".into(), pre), ("decoder".into(), dec)])?;
    let bytes = std::fs::read(&report_path).context("decoder wrote no report")?;
    let _ = std::fs::remove_file(&report_path);
    let mut report: KvReport = serde_json::from_slice(&bytes)?;
    report.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    println!("kvdemo: {} layers x {} chunks x {} KiB pages over UDP", report.layers, report.chunks, report.page_bytes >> 10);
    for c in &report.checks {
        println!("{} {}{}", if c.ok { "PASS" } else { "FAIL" }, c.name, if c.ok { String::new() } else { format!(": {}", c.detail) });
    }
    println!("prefiller: {:?}", report.prefiller);
    println!("wall time {:.0} ms", report.wall_ms);
    write_json(&a.out, &report)?;
    if report.checks.iter().any(|c| !c.ok) {
        bail!("kvdemo checks failed");
    }
    Ok(())
}

fn engine(name: &str, rails: usize, seed: u64, trace: Option<Arc<Trace>>) -> Result<TransferEngine> {
    let cfg = SocketConfig { seed, ..SocketConfig::default() };
    let t = match &trace {
        Some(t) => UdpTransport::with_trace(cfg, t.clone()),
        None => UdpTransport::new(cfg),
    };
    Ok(TransferEngine::new(&*t, EngineConfig::named(name).rails(rails).trace(trace))?)
}

fn prefiller(a: &KvArgs) -> Result<()> {
    let kv = a.config();
    let e = engine("prefiller", a.rails, a.seed, None)?;
    let pre = Prefiller::new(e.clone(), kv.clone(), HeadSlice::full(kv.page_bytes))?;
    let boot = Bootstrap::connect(a.bootstrap.ok_or_else(|| anyhow!("--bootstrap missing"))?, 0, CONNECT)?;
    boot.all_gather("addr", 2, &e.main_address().encode())?;
    // Stay up until the decoder is done, then hand over the counters.
    boot.barrier("finished", 2)?;
    boot.all_gather("done", 2, &serde_json::to_vec(&pre.stats())?)?;
    pre.shutdown();
    e.shutdown();
    Ok(())
}

fn decoder(a: &KvArgs) -> Result<()> {
    let kv = a.config();
    let trace = Arc::new(Trace::new());
    let e = engine("decoder", a.rails, a.seed + 1, Some(trace.clone()))?;
    let dec = Decoder::new(e.clone(), kv.clone())?;
    let boot = Bootstrap::connect(a.bootstrap.ok_or_else(|| anyhow!("--bootstrap missing"))?, 1, CONNECT)?;
    let addrs = boot.all_gather("addr", 2, &e.main_address().encode())?;
    let target = PrefillTarget { addr: NetAddr::decode(&addrs[0])?, slice: HeadSlice::full(kv.page_bytes), context: true };
    let mut checks: Vec<Check> = decoder_session(&dec, &trace, &target, a.chunks)
        .into_iter()
        .map(|(name, r)| Check { name: name.into(), ok: r.is_ok(), detail: r.err().unwrap_or_default() })
        .collect();
    boot.barrier("finished", 2)?;
    let done = boot.all_gather("done", 2, &[])?;
    let stats: PrefillStats = serde_json::from_slice(&done[0])?;
    checks.push(Check {
        name: "prefiller confirmed exactly one cancellation".into(),
        ok: stats.cancelled == 1,
        detail: format!("{stats:?}"),
    });
    let report = KvReport { layers: kv.layers, chunks: a.chunks, page_bytes: kv.page_bytes, checks, prefiller: stats, wall_ms: 0.0 };
    write_json(&a.report, &report)?;
    dec.shutdown();
    e.shutdown();
    Ok(())
}
