use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use transfer_engine::bootstrap::{Bootstrap, Rendezvous};
use transfer_engine::conformance::weights::{check_one_sided, expected_param, random_metas};
use transfer_engine::transport::socket::{SocketConfig, UdpTransport};
use transfer_engine::weights::{
    build_schedule, InferenceRank, ParamMeta, StageTimes, StepBarrier, StepReport, SyntheticWeights, TrainRank, TransferSchedule,
    WeightsError,
};
use transfer_engine::wire::Wire;
use transfer_engine::{EngineConfig, MrDesc, Trace, TransferEngine};

use crate::{bootstrap_arg, human, parse_size, spawn_self, wait_children, write_json};

const CONNECT: Duration = Duration::from_secs(20);

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Role {
    Train,
    Infer,
}

#[derive(Args, Debug)]
pub struct WtArgs {
    #[arg(long, default_value_t = 4)]
    train_ranks: u32,
    #[arg(long, default_value_t = 2)]
    infer_ranks: u32,
    /// Logical parameters in the random model.
    #[arg(long, default_value_t = 24)]
    params: usize,
    /// Mesh groups the training ranks are split into.
    #[arg(long, default_value_t = 2)]
    groups: u32,
    /// Temporary-memory watermark per training rank. Defaults to twice the
    /// largest task.
    #[arg(long, value_parser = parse_size)]
    watermark: Option<usize>,
    /// Write the transfer schedule as JSONL here.
    #[arg(long)]
    schedule_out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    rails: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, hide = true)]
    role: Option<Role>,
    #[arg(long, hide = true)]
    rank: Option<u32>,
    #[arg(long, hide = true)]
    bootstrap: Option<SocketAddr>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorkerReport {
    pub role: String,
    pub rank: u32,
    pub step: Option<StepReport>,
    pub params: usize,
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WtReport {
    pub train_ranks: u32,
    pub infer_ranks: u32,
    pub tasks: usize,
    pub watermark: u64,
    pub workers: Vec<WorkerReport>,
    pub wall_ms: f64,
}

struct Plan {
    train: Vec<ParamMeta>,
    infer: Vec<ParamMeta>,
    schedule: TransferSchedule,
    watermark: u64,
}

impl WtArgs {
    /// Every process derives the same metadata and schedule from the seed.
    fn plan(&self) -> Result<Plan> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (train, infer) = random_metas(&mut rng, self.params, self.train_ranks, self.infer_ranks, self.groups);
        let schedule = build_schedule(&train, &infer)?;
        let largest = schedule.tasks.iter().map(|t| t.temp_bytes()).max().unwrap_or(1);
        let watermark = self.watermark.map(|w| w as u64).unwrap_or(2 * largest);
        Ok(Plan { train, infer, schedule, watermark })
    }

    fn world(&self) -> u32 {
        self.train_ranks + self.infer_ranks
    }

    fn worker_args(&self, role: &str, rank: u32, addr: SocketAddr) -> Vec<String> {
        let mut v: Vec<String> = vec!["wtransfer".into(), "--role".into(), role.into(), "--rank".into(), rank.to_string()];
        v.extend(bootstrap_arg(addr));
        for (flag, val) in [
            ("--train-ranks", self.train_ranks.to_string()),
            ("--infer-ranks", self.infer_ranks.to_string()),
            ("--params", self.params.to_string()),
            ("--groups", self.groups.to_string()),
            ("--rails", self.rails.to_string()),
            ("--seed", self.seed.to_string()),
        ] {
            v.push(flag.into());
            v.push(val);
        }
        if let Some(w) = self.watermark {
            v.push("--watermark".into());
            v.push(w.to_string());
        }
        v
    }

    fn connect(&self, boot_rank: u32) -> Result<Arc<Bootstrap>> {
        let addr = self.bootstrap.ok_or_else(|| anyhow!("--bootstrap missing"))?;
        Ok(Arc::new(Bootstrap::connect(addr, boot_rank, CONNECT)?))
    }
}

pub fn run(a: WtArgs) -> Result<()> {
    if a.train_ranks == 0 || a.infer_ranks == 0 {
        bail!("need at least one training and one inference rank");
    }
    let rank = a.rank.unwrap_or(0);
    match a.role {
        Some(Role::Train) => train(&a, rank),
        Some(Role::Infer) => infer(&a, rank),
        None => parent(&a),
    }
}

fn parent(a: &WtArgs) -> Result<()> {
    let t0 = Instant::now();
    let plan = a.plan()?;
    if let Some(p) = &a.schedule_out {
        let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        plan.schedule.write_jsonl(std::io::BufWriter::new(f))?;
    }
    let rv = Rendezvous::bind("127.0.0.1:0")?;
    let addr = rv.local_addr();
    let mut children = Vec::new();
    for r in 0..a.train_ranks {
        children.push((format!("train{r}"), spawn_self(&a.worker_args("train", r, addr))?));
    }
    for r in 0..a.infer_ranks {
        children.push((format!("infer{r}"), spawn_self(&a.worker_args("infer", r, addr))?));
    }
    let world = a.world();
    let gather = std::thread::spawn(move || -> Result<Vec<Vec<u8>>> {
        let boot = Bootstrap::connect(addr, world, CONNECT)?;
        Ok(boot.all_gather("report", world + 1, &[])?)
    });
    wait_children(children)?;
    let blobs = gather.join().map_err(|_| anyhow!("report gather panicked"))??;
    let workers: Vec<WorkerReport> = blobs[..world as usize].iter().map(|b| serde_json::from_slice(b)).collect::<Result<_, _>>()?;
    let report = WtReport {
        train_ranks: a.train_ranks,
        infer_ranks: a.infer_ranks,
        tasks: plan.schedule.tasks.len(),
        watermark: plan.watermark,
        workers,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    println!(
        "wtransfer: {} training -> {} inference ranks, {} tasks, watermark {}",
        a.train_ranks,
        a.infer_ranks,
        report.tasks,
        human(report.watermark as usize)
    );
    println!("{:<8} {:>6} {:>12} {:>14} {:>10}", "rank", "tasks", "bytes", "peak inflight", "ms");
    for w in &report.workers {
        match &w.step {
            Some(s) => {
                println!("{:<8} {:>6} {:>12} {:>14} {:>10.1}", format!("train{}", w.rank), s.tasks, s.bytes, s.peak_inflight, s.wall_ms)
            }
            None => println!("{:<8} {:>6} params verified", format!("infer{}", w.rank), w.params),
        }
    }
    println!("wall time {:.0} ms", report.wall_ms);
    write_json(&a.out, &report)?;
    let failed: Vec<String> =
        report.workers.iter().filter_map(|w| w.error.as_ref().map(|e| format!("{}{}: {e}", w.role, w.rank))).collect();
    if !failed.is_empty() {
        bail!("weight transfer failed: {}", failed.join("; "));
    }
    Ok(())
}

fn engine(name: String, rails: usize, seed: u64, trace: Option<Arc<Trace>>) -> Result<TransferEngine> {
    let cfg = SocketConfig { seed, ..SocketConfig::default() };
    let t = match &trace {
        Some(t) => UdpTransport::with_trace(cfg, t.clone()),
        None => UdpTransport::new(cfg),
    };
    Ok(TransferEngine::new(&*t, EngineConfig::named(name).rails(rails).trace(trace))?)
}

/// Mesh-group barrier among the training processes.
struct TcpBarrier {
    boot: Arc<Bootstrap>,
    ranks: u32,
}

impl StepBarrier for TcpBarrier {
    fn wait(&self, mesh_group: u32) -> Result<(), WeightsError> {
        self.boot.barrier(&format!("mg{mesh_group}"), self.ranks).map_err(|e| WeightsError::Barrier(e.to_string()))
    }
}

fn train(a: &WtArgs, rank: u32) -> Result<()> {
    let plan = a.plan()?;
    let e = engine(format!("train{rank}"), a.rails, a.seed.wrapping_add(rank as u64), None)?;
    let boot = a.connect(rank)?;
    let descs = boot.all_gather("descs", a.world(), &[])?;
    let mut dests = HashMap::new();
    for r in 0..a.infer_ranks {
        dests.insert(r, MrDesc::decode(&descs[(a.train_ranks + r) as usize])?);
    }
    let tr = TrainRank {
        engine: e.clone(),
        rank,
        train: plan.train.iter().filter(|m| m.sharding.index == 0).map(|m| (m.name.clone(), m.clone())).collect(),
        source: Arc::new(SyntheticWeights::new(&plan.train, 0)),
        barrier: Arc::new(TcpBarrier { boot: boot.clone(), ranks: a.train_ranks }),
        dests,
    };
    let result = tr.run_step(&plan.schedule, plan.watermark, StageTimes::default());
    boot.barrier("written", a.world())?;
    let (step, error) = match result {
        Ok(s) => (Some(s), None),
        Err(err) => (None, Some(err.to_string())),
    };
    let report = WorkerReport { role: "train".into(), rank, step, params: 0, error };
    boot.all_gather("report", a.world() + 1, &serde_json::to_vec(&report)?)?;
    e.shutdown();
    Ok(())
}

fn verify(ir: &InferenceRank, plan: &Plan, trace: &Trace, e: &TransferEngine) -> Result<usize, String> {
    let mine: Vec<&ParamMeta> = plan.infer.iter().filter(|m| m.rank == ir.rank).collect();
    for m in &mine {
        let got = ir.param(&m.name).ok_or(format!("no slot for {}", m.name))?;
        if got != expected_param(m, &plan.train, 0) {
            return Err(format!("{} ({:?}) differs from the training weights", m.name, m.dtype));
        }
    }
    if !mine.is_empty() {
        check_one_sided(&trace.snapshot(), &[e])?;
    }
    Ok(mine.len())
}

fn infer(a: &WtArgs, rank: u32) -> Result<()> {
    let plan = a.plan()?;
    let trace = Arc::new(Trace::new());
    let e = engine(format!("infer{rank}"), a.rails, a.seed.wrapping_add(1000 + rank as u64), Some(trace.clone()))?;
    let ir = InferenceRank::new(&e, rank, &plan.infer)?;
    let boot = a.connect(a.train_ranks + rank)?;
    boot.all_gather("descs", a.world(), &ir.desc.encode())?;
    boot.barrier("written", a.world())?;
    let (params, error) = match verify(&ir, &plan, &trace, &e) {
        Ok(n) => (n, None),
        Err(err) => (0, Some(err)),
    };
    let report = WorkerReport { role: "infer".into(), rank, step: None, params, error };
    boot.all_gather("report", a.world() + 1, &serde_json::to_vec(&report)?)?;
    e.shutdown();
    Ok(())
}
