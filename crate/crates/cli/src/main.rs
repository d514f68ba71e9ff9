mod kv;
mod moe;
mod p2p;
mod wt;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "tebench", about = "Transfer engine benchmarks and demos")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Single and paged write throughput between two engines.
    P2p(p2p::P2pArgs),
    /// MoE dispatch/combine latency percentiles and the private-buffer sweep.
    Moebench(moe::MoeArgs),
    /// Prefiller and decoder in two processes over the socket transport.
    Kvdemo(kv::KvArgs),
    /// Weight transfer from training to inference processes.
    Wtransfer(wt::WtArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    Sim,
    Socket,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug)]
pub struct Common {
    #[arg(long, value_enum, default_value = "sim")]
    pub transport: TransportKind,
    #[arg(long, default_value_t = 2)]
    pub rails: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `64K`, `1M`, `4096` (binary multiples).
pub fn parse_size(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let (num, mul) = match s.chars().last() {
        Some('K' | 'k') => (&s[..s.len() - 1], 1 << 10),
        Some('M' | 'm') => (&s[..s.len() - 1], 1 << 20),
        Some('G' | 'g') => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<usize>().map(|n| n * mul).map_err(|e| format!("bad size {s:?}: {e}"))
}

pub fn write_json(path: &Option<PathBuf>, value: &impl Serialize) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn human(bytes: usize) -> String {
    match bytes {
        b if b >= 1 << 20 && b % (1 << 20) == 0 => format!("{}MiB", b >> 20),
        b if b >= 1 << 10 && b % (1 << 10) == 0 => format!("{}KiB", b >> 10),
        b => format!("{b}B"),
    }
}

/// Re-runs this binary with `args` (a worker role of some subcommand).
pub fn spawn_self(args: &[String]) -> Result<Child> {
    let exe = std::env::current_exe().context("locating own executable")?;
    Command::new(exe).args(args).spawn().context("spawning worker process")
}

pub fn wait_children(children: Vec<(String, Child)>) -> Result<()> {
    let mut failed = Vec::new();
    for (name, mut c) in children {
        let status = c.wait()?;
        if !status.success() {
            failed.push(format!("{name} ({status})"));
        }
    }
    if !failed.is_empty() {
        bail!("worker processes failed: {}", failed.join(", "));
    }
    Ok(())
}

pub fn bootstrap_arg(addr: SocketAddr) -> [String; 2] {
    ["--bootstrap".into(), addr.to_string()]
}

pub fn path_arg(flag: &str, p: &Path) -> [String; 2] {
    [flag.into(), p.display().to_string()]
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::P2p(a) => p2p::run(a),
        Cmd::Moebench(a) => moe::run(a),
        Cmd::Kvdemo(a) => kv::run(a),
        Cmd::Wtransfer(a) => wt::run(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64K"), Ok(65536));
        assert_eq!(parse_size("32M"), Ok(32 << 20));
        assert_eq!(parse_size("100"), Ok(100));
        assert!(parse_size("x").is_err());
        assert_eq!(human(64 << 10), "64KiB");
        assert_eq!(human(3 << 20), "3MiB");
    }
}
