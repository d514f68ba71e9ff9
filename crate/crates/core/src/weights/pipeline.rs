//! Per-training-rank executor: H2D copy, prepare, write and barrier lanes
//! with watermark-gated admission.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use super::schedule::{inference_layout, DType, ParamMeta, Prepare, Task, TransferSchedule};
use super::tensor::{concat, quantize_bf16_to_fp8, slice};
use super::WeightsError;
use crate::mem::DeviceBuffer;
use crate::types::{Device, DoneFlag, MrDesc, MrHandle, OnDone};
use crate::TransferEngine;

/// Where a training rank reads its weights from. `full_tensor()` is
/// modelled as reading every shard, so sources see all of them.
pub trait TensorSource: Send + Sync {
    /// bf16 bytes of shard `index` of training parameter `name`.
    fn shard(&self, name: &str, index: u32) -> Result<Vec<u8>, WeightsError>;
}

/// Synchronization among training ranks at the end of each mesh group.
pub trait StepBarrier: Send + Sync {
    fn wait(&self, mesh_group: u32) -> Result<(), WeightsError>;
}

pub struct LocalBarrier(std::sync::Barrier);

impl LocalBarrier {
    pub fn new(ranks: usize) -> Self {
        Self(std::sync::Barrier::new(ranks))
    }
}

impl StepBarrier for LocalBarrier {
    fn wait(&self, _mesh_group: u32) -> Result<(), WeightsError> {
        self.0.wait();
        Ok(())
    }
}

/// Deterministic bf16 weights for tests and demos: element `i` of `name`
/// at training step `step`.
pub struct SyntheticWeights {
    params: HashMap<String, ParamMeta>,
    step: u64,
}

impl SyntheticWeights {
    pub fn new(train: &[ParamMeta], step: u64) -> Self {
        Self { params: train.iter().map(|m| (m.name.clone(), m.clone())).collect(), step }
    }

    pub fn element(name: &str, step: u64, i: usize) -> u16 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
        let mut x = h ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
        x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 29;
        // Finite values with magnitudes in [2^-7, 2^8).
        let sign = ((x >> 63) as u16) << 15;
        let exp = 120 + (x % 15) as u16;
        let mant = ((x >> 8) & 0x7f) as u16;
        sign | exp << 7 | mant
    }

    /// Full tensor bytes of `name`.
    pub fn full(&self, name: &str) -> Option<Vec<u8>> {
        let m = self.params.get(name)?;
        Some((0..m.numel()).flat_map(|i| Self::element(name, self.step, i).to_le_bytes()).collect())
    }
}

impl TensorSource for SyntheticWeights {
    fn shard(&self, name: &str, index: u32) -> Result<Vec<u8>, WeightsError> {
        let m = self.params.get(name).ok_or_else(|| WeightsError::MissingParam(name.to_string()))?;
        let full = self.full(name).unwrap();
        let sh = m.sharding;
        Ok(slice(&full, &m.shape, sh.axis, index as usize, sh.count as usize, 2).0)
    }
}

/// Shards of every source parameter of a task, in shard order.
type Shards = Vec<Vec<Vec<u8>>>;

fn fetch(prep: &Prepare, train: &HashMap<String, ParamMeta>, src: &dyn TensorSource) -> Result<Shards, WeightsError> {
    prep.sources
        .iter()
        .map(|name| {
            let m = train.get(name).ok_or_else(|| WeightsError::MissingParam(name.clone()))?;
            (0..m.sharding.count).map(|i| src.shard(name, i)).collect()
        })
        .collect()
}

/// Reconstructs, fuses, slices and narrows.
pub fn prepare(prep: &Prepare, train: &HashMap<String, ParamMeta>, shards: &Shards) -> Result<Vec<u8>, WeightsError> {
    let mut fulls = Vec::with_capacity(prep.sources.len());
    for (name, parts) in prep.sources.iter().zip(shards) {
        let m = &train[name];
        let sh = m.sharding;
        let mut part_shape = m.shape.clone();
        part_shape[sh.axis] /= sh.count as usize;
        if parts.len() != sh.count as usize {
            return Err(WeightsError::MissingShard { name: name.clone(), index: parts.len() as u32 });
        }
        let views: Vec<(&[u8], Vec<usize>)> = parts.iter().map(|p| (p.as_slice(), part_shape.clone())).collect();
        fulls.push(concat(&views, sh.axis, 2));
    }
    let views: Vec<(&[u8], Vec<usize>)> = fulls.iter().map(|(b, s)| (b.as_slice(), s.clone())).collect();
    let (fused, shape) = concat(&views, 0, 2);
    if shape != prep.shape {
        return Err(WeightsError::ShapeMismatch { name: prep.sources.join("+"), detail: format!("{shape:?} vs {:?}", prep.shape) });
    }
    let (part, _) = slice(&fused, &shape, prep.axis, prep.index as usize, prep.count as usize, 2);
    Ok(match prep.dtype {
        DType::Bf16 => part,
        DType::Fp8 => quantize_bf16_to_fp8(&part),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimes {
    pub h2d: Duration,
    pub prepare: Duration,
    pub write: Duration,
    pub barrier: Duration,
}

impl StageTimes {
    pub fn uniform(t: Duration) -> Self {
        Self { h2d: t, prepare: t, write: t, barrier: t }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub rank: u32,
    pub wall_ms: f64,
    pub tasks: usize,
    pub bytes: u64,
    pub peak_inflight: u64,
}

/// An inference rank's weight region. It only registers memory; it takes
/// no part in the transfer.
pub struct InferenceRank {
    pub rank: u32,
    pub buf: Arc<DeviceBuffer>,
    pub desc: MrDesc,
    pub layout: BTreeMap<String, (u64, u64)>,
}

impl InferenceRank {
    pub fn new(engine: &TransferEngine, rank: u32, metas: &[ParamMeta]) -> Result<Self, WeightsError> {
        let mine: Vec<&ParamMeta> = metas.iter().filter(|m| m.rank == rank).collect();
        let (layout, len) = inference_layout(&mine);
        let buf = DeviceBuffer::new(len.max(1) as usize);
        let (_, desc) = engine.reg_mr(&buf, Device::Gpu(0))?;
        Ok(Self { rank, buf, desc, layout })
    }

    pub fn param(&self, name: &str) -> Option<Vec<u8>> {
        let (off, len) = *self.layout.get(name)?;
        Some(self.buf.read_vec(off as usize, len as usize))
    }
}

pub struct TrainRank {
    pub engine: TransferEngine,
    pub rank: u32,
    pub train: HashMap<String, ParamMeta>,
    pub source: Arc<dyn TensorSource>,
    pub barrier: Arc<dyn StepBarrier>,
    /// Weight region of every inference rank, from the initialization gather.
    pub dests: HashMap<u32, MrDesc>,
}

enum Item {
    Task(usize, u64),
    GroupEnd(u32),
}

struct InFlight {
    item: Item,
    shards: Option<Shards>,
    prepared: Option<Arc<DeviceBuffer>>,
    /// Registration of the prepared buffer, released once its writes
    /// completed.
    handle: Option<MrHandle>,
    flags: Vec<Arc<DoneFlag>>,
}

fn pad(start: Instant, t: Duration) {
    let spent = start.elapsed();
    if spent < t {
        std::thread::sleep(t - spent);
    }
}

impl TrainRank {
    fn mark(&self, label: &str, value: u64) {
        if let Some(t) = self.engine.trace() {
            t.mark(self.engine.name(), label, value);
        }
    }

    /// Runs this rank's share of `schedule`. Admission keeps the summed
    /// temporary memory of in-flight tasks at or below `watermark`.
    pub fn run_step(&self, schedule: &TransferSchedule, watermark: u64, times: StageTimes) -> Result<StepReport, WeightsError> {
        let tasks: Vec<&Task> = schedule.for_rank(self.rank).collect();
        if let Some(t) = tasks.iter().find(|t| t.temp_bytes() > watermark) {
            return Err(WeightsError::Watermark { param: t.param.clone(), need: t.temp_bytes(), watermark });
        }
        let mut items = Vec::new();
        for g in schedule.mesh_groups() {
            for (i, t) in tasks.iter().enumerate().filter(|(_, t)| t.mesh_group == g) {
                items.push(Item::Task(i, t.temp_bytes()));
            }
            items.push(Item::GroupEnd(g));
        }
        let start = Instant::now();
        let (h2d_tx, h2d_rx) = unbounded::<InFlight>();
        let (prep_tx, prep_rx) = unbounded::<InFlight>();
        let (write_tx, write_rx) = unbounded::<InFlight>();
        let (bar_tx, bar_rx) = unbounded::<InFlight>();
        let (done_tx, done_rx) = unbounded::<Result<Item, WeightsError>>();
        let mut peak = 0u64;
        let result = std::thread::scope(|s| {
            s.spawn(|| self.h2d_lane(&tasks, times, h2d_rx, prep_tx, done_tx.clone()));
            s.spawn(|| self.prepare_lane(&tasks, times, prep_rx, write_tx, done_tx.clone()));
            s.spawn(|| self.write_lane(&tasks, times, write_rx, bar_tx, done_tx.clone()));
            s.spawn(|| self.barrier_lane(times, bar_rx, done_tx.clone()));
            let r = self.admit(items, watermark, &h2d_tx, &done_rx, &mut peak);
            drop(h2d_tx);
            r
        });
        result?;
        let bytes = tasks.iter().map(|t| t.len * t.dests.len() as u64).sum();
        Ok(StepReport { rank: self.rank, wall_ms: start.elapsed().as_secs_f64() * 1e3, tasks: tasks.len(), bytes, peak_inflight: peak })
    }

    fn admit(
        &self,
        items: Vec<Item>,
        watermark: u64,
        h2d: &Sender<InFlight>,
        done: &Receiver<Result<Item, WeightsError>>,
        peak: &mut u64,
    ) -> Result<(), WeightsError> {
        let mut inflight = 0u64;
        let retire = |item: Result<Item, WeightsError>, inflight: &mut u64| -> Result<Option<u32>, WeightsError> {
            match item? {
                Item::Task(i, temp) => {
                    *inflight -= temp;
                    self.mark("task_done", i as u64);
                    self.mark("inflight", *inflight);
                    Ok(None)
                }
                Item::GroupEnd(g) => Ok(Some(g)),
            }
        };
        for item in items {
            match item {
                Item::Task(i, temp) => {
                    while inflight + temp > watermark {
                        let d = done.recv().map_err(|_| WeightsError::Aborted)?;
                        retire(d, &mut inflight)?;
                    }
                    inflight += temp;
                    *peak = (*peak).max(inflight);
                    self.mark("task_start", i as u64);
                    self.mark("inflight", inflight);
                    let _ = h2d.send(InFlight { item: Item::Task(i, temp), shards: None, prepared: None, handle: None, flags: vec![] });
                }
                Item::GroupEnd(g) => {
                    let _ = h2d.send(InFlight { item: Item::GroupEnd(g), shards: None, prepared: None, handle: None, flags: vec![] });
                    // Mesh groups run one after the other.
                    loop {
                        let d = done.recv().map_err(|_| WeightsError::Aborted)?;
                        if retire(d, &mut inflight)? == Some(g) {
                            break;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn h2d_lane(
        &self,
        tasks: &[&Task],
        times: StageTimes,
        rx: Receiver<InFlight>,
        tx: Sender<InFlight>,
        err: Sender<Result<Item, WeightsError>>,
    ) {
        for mut f in rx {
            if let Item::Task(i, _) = f.item {
                let t0 = Instant::now();
                match fetch(&tasks[i].prepare, &self.train, &*self.source) {
                    Ok(s) => f.shards = Some(s),
                    Err(e) => {
                        let _ = err.send(Err(e));
                        return;
                    }
                }
                let offloaded = tasks[i].prepare.sources.iter().any(|n| self.train.get(n).is_some_and(|m| m.offload));
                if offloaded {
                    pad(t0, times.h2d);
                }
            }
            let _ = tx.send(f);
        }
    }

    fn prepare_lane(
        &self,
        tasks: &[&Task],
        times: StageTimes,
        rx: Receiver<InFlight>,
        tx: Sender<InFlight>,
        err: Sender<Result<Item, WeightsError>>,
    ) {
        for mut f in rx {
            if let Item::Task(i, _) = f.item {
                let t0 = Instant::now();
                match prepare(&tasks[i].prepare, &self.train, f.shards.as_ref().unwrap()) {
                    Ok(bytes) if bytes.len() as u64 == tasks[i].len => f.prepared = Some(DeviceBuffer::from_bytes(&bytes)),
                    Ok(bytes) => {
                        let _ = err.send(Err(WeightsError::ShapeMismatch {
                            name: tasks[i].param.clone(),
                            detail: format!("prepared {} bytes, schedule says {}", bytes.len(), tasks[i].len),
                        }));
                        return;
                    }
                    Err(e) => {
                        let _ = err.send(Err(e));
                        return;
                    }
                }
                f.shards = None;
                pad(t0, times.prepare);
            }
            let _ = tx.send(f);
        }
    }

    fn write_lane(
        &self,
        tasks: &[&Task],
        times: StageTimes,
        rx: Receiver<InFlight>,
        tx: Sender<InFlight>,
        err: Sender<Result<Item, WeightsError>>,
    ) {
        for mut f in rx {
            if let Item::Task(i, _) = f.item {
                let t0 = Instant::now();
                let task = tasks[i];
                let buf = f.prepared.take().unwrap();
                let submitted = (|| -> Result<(MrHandle, Vec<Arc<DoneFlag>>), WeightsError> {
                    let (h, _) = self.engine.reg_mr(&buf, Device::Gpu(0))?;
                    let mut flags = Vec::with_capacity(task.dests.len());
                    for d in &task.dests {
                        let desc = self.dests.get(&d.rank).ok_or(WeightsError::UnknownRank(d.rank))?;
                        let (od, flag) = OnDone::flag();
                        self.engine.submit_single_write(task.len, None, (h, 0), (desc, d.offset), od)?;
                        flags.push(flag);
                    }
                    Ok((h, flags))
                })();
                match submitted {
                    Ok((h, flags)) => {
                        f.handle = Some(h);
                        f.flags = flags;
                    }
                    Err(e) => {
                        let _ = err.send(Err(e));
                        return;
                    }
                }
                pad(t0, times.write);
            }
            let _ = tx.send(f);
        }
    }

    fn barrier_lane(&self, times: StageTimes, rx: Receiver<InFlight>, done: Sender<Result<Item, WeightsError>>) {
        for f in rx {
            let t0 = Instant::now();
            for flag in &f.flags {
                if let Err(e) = flag.wait() {
                    let _ = done.send(Err(e.into()));
                    return;
                }
            }
            if let Some(h) = f.handle {
                let _ = self.engine.dereg_mr(h);
            }
            match f.item {
                Item::Task(..) => pad(t0, times.barrier),
                Item::GroupEnd(g) => {
                    self.mark("barrier", g as u64);
                    if let Err(e) = self.barrier.wait(g) {
                        let _ = done.send(Err(e));
                        return;
                    }
                }
            }
            let _ = done.send(Ok(f.item));
        }
    }
}

/// Makespan of `k` tasks through the four lanes when every stage of every
/// task takes `stage`, with at most `slots` tasks in flight.
pub fn simulate_pipeline(k: usize, stage: [Duration; 4], slots: usize) -> Duration {
    let slots = slots.max(1);
    let mut lane_free = [Duration::ZERO; 4];
    let mut finish: Vec<Duration> = Vec::with_capacity(k);
    for i in 0..k {
        // Admission waits for the task `slots` places earlier to retire.
        let mut t = if i >= slots { finish[i - slots] } else { Duration::ZERO };
        for (s, free) in lane_free.iter_mut().enumerate() {
            t = t.max(*free) + stage[s];
            *free = t;
        }
        finish.push(t);
    }
    finish.last().copied().unwrap_or_default()
}
