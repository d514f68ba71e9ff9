use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use transfer_engine::bench::{bench_moe, private_sweep, MoeBenchConfig, MoeReport, Percentiles, SweepPoint, DEFAULT_RAIL_BYTES_PER_SEC};
use transfer_engine::moe::RoutingSpec;
use transfer_engine::Trace;

use crate::{write_json, Common, TransportKind};

#[derive(Args, Debug)]
pub struct MoeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    #[arg(long, default_value_t = 16)]
    experts: usize,
    /// Tokens per rank and step.
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 4)]
    topk: usize,
    #[arg(long, default_value_t = 32)]
    private_tokens: usize,
    #[arg(long, default_value_t = 256 + 8 * 4)]
    token_bytes: usize,
    /// Ranks per node; defaults to half the ranks.
    #[arg(long)]
    node_size: Option<usize>,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// One-way fabric latency.
    #[arg(long, default_value_t = 10.0)]
    latency_us: f64,
    /// Also sweep the private buffer over these sizes.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<usize>,
    /// Export the trace of the main run as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Serialize)]
struct Report {
    run: MoeReport,
    sweep: Vec<SweepPoint>,
}

fn row(name: &str, p: &Percentiles) {
    println!("{name:<14} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2}", p.mean, p.p01, p.p25, p.p50, p.p75, p.p95, p.p99);
}

pub fn run(a: MoeArgs) -> Result<()> {
    if a.common.transport != TransportKind::Sim {
        bail!("moebench runs its ranks in one process on the simulated fabric");
    }
    let spec = RoutingSpec {
        ranks: a.ranks,
        experts: a.experts,
        tokens: a.tokens,
        topk: a.topk,
        private: a.private_tokens,
        token_bytes: a.token_bytes,
        node_size: a.node_size,
        ..RoutingSpec::default()
    };
    let lat = (a.latency_us * 1e3) as u64;
    let base = MoeBenchConfig::default();
    let trace = a.trace.as_ref().map(|_| Arc::new(Trace::new()));
    let cfg = MoeBenchConfig {
        spec,
        fabric: transfer_engine::transport::sim::FaultConfig {
            latency_min_ns: lat,
            latency_max_ns: lat,
            rail_bytes_per_sec: Some(DEFAULT_RAIL_BYTES_PER_SEC),
            ..base.fabric
        },
        rails: a.common.rails,
        seed: a.common.seed,
        warmup: a.warmup,
        iters: a.iters,
        trace: trace.clone(),
    };
    let run = bench_moe(&cfg)?;
    println!("{} ranks, {} samples per phase, {} network writes (microseconds)", run.ranks, run.samples, run.network_writes);
    println!("{:<14} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}", "phase", "mean", "p01", "p25", "p50", "p75", "p95", "p99");
    for (name, p) in &run.phases {
        row(name, p);
    }
    if let (Some(path), Some(t)) = (&a.trace, &trace) {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        t.write_jsonl(BufWriter::new(f))?;
    }
    let sweep = if a.sweep.is_empty() {
        vec![]
    } else {
        let points = private_sweep(&MoeBenchConfig { trace: None, ..cfg }, &a.sweep)?;
        println!("\nprivate-buffer sweep (dispatch, microseconds)");
        println!("{:>6} {:>9} {:>9} {:>9}", "P", "p50", "p95", "mean");
        for p in &points {
            println!("{:>6} {:>9.2} {:>9.2} {:>9.2}", p.private, p.dispatch.p50, p.dispatch.p95, p.dispatch.mean);
        }
        points
    };
    write_json(&a.common.out, &Report { run, sweep })
}
