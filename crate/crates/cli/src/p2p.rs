use std::sync::Arc;

use anyhow::Result;
use clap::Args;
use transfer_engine::bench::{bench_p2p, P2pConfig};
use transfer_engine::transport::sim::SimFabric;
use transfer_engine::transport::socket::{SocketConfig, UdpTransport};
use transfer_engine::transport::Transport;

use crate::{human, parse_size, write_json, Common, TransportKind};

#[derive(Args, Debug)]
pub struct P2pArgs {
    #[command(flatten)]
    common: Common,
    /// Single-write message sizes.
    #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "64K,256K,1M,32M")]
    msg_sizes: Vec<usize>,
    /// Page sizes of the paged runs.
    #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "1K,8K,16K,64K")]
    page_sizes: Vec<usize>,
    /// Bytes per paged operation.
    #[arg(long, value_parser = parse_size, default_value = "8M")]
    paged_bytes: usize,
    #[arg(long, default_value_t = 4)]
    iters: usize,
    /// Per-rail line rate of the simulated fabric.
    #[arg(long, default_value_t = 10.0)]
    rate_gbps: f64,
}

pub fn run(a: P2pArgs) -> Result<()> {
    let mut cfg = P2pConfig {
        rails: a.common.rails,
        single_sizes: a.msg_sizes,
        page_sizes: a.page_sizes,
        paged_bytes: a.paged_bytes,
        iters: a.iters,
        rail_bytes_per_sec: Some((a.rate_gbps * 1e9 / 8.0) as u64),
    };
    let transport: Arc<dyn Transport> = match a.common.transport {
        TransportKind::Sim => SimFabric::new(cfg.sim_fabric(), a.common.seed),
        TransportKind::Socket => {
            cfg.rail_bytes_per_sec = None;
            UdpTransport::new(SocketConfig { seed: a.common.seed, ..SocketConfig::default() })
        }
    };
    let report = bench_p2p(&*transport, &cfg)?;
    println!("{:<8} {:>8} {:>10} {:>9}", "kind", "size", "Gbps", "of line");
    for r in &report.rows {
        let frac = r.fraction.map(|f| format!("{:.1}%", f * 100.0)).unwrap_or_else(|| "-".into());
        println!("{:<8} {:>8} {:>10.2} {:>9}", r.kind, human(r.size), r.gbps, frac);
    }
    write_json(&a.common.out, &report)
}
