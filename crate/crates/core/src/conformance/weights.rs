//! Weight transfer invariants: exactly-once schedule coverage, source
//! balance, byte fidelity, watermark safety, one-sidedness and pipelining.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cluster, ensure, CheckResult};
use crate::trace::{TraceEvent, TraceKind};
use crate::transport::sim::FaultConfig;
use crate::weights::tensor::bf16_to_f32;
use crate::weights::{
    build_schedule, DType, InferenceRank, LocalBarrier, ParamMeta, Sharding, StageTimes, StepBarrier, StepReport, SyntheticWeights,
    TensorSource, TrainRank, TransferSchedule,
};
use crate::TransferEngine;

pub fn run_all(cfg: &FaultConfig, seed: u64) -> Vec<(&'static str, CheckResult)> {
    vec![("weights fidelity and one-sidedness", fidelity(cfg, seed)), ("weights single-task watermark", sequential_watermark(cfg, seed))]
}

/// Random training and inference metadata. Training ranks are split into
/// `groups` contiguous mesh groups; every parameter is sharded inside its
/// group. Some inference parameters fuse two training parameters, some
/// inference ranks skip a parameter.
pub fn random_metas(
    rng: &mut impl Rng,
    params: usize,
    train_ranks: u32,
    infer_ranks: u32,
    groups: u32,
) -> (Vec<ParamMeta>, Vec<ParamMeta>) {
    let groups = groups.clamp(1, train_ranks);
    let per_group = train_ranks / groups;
    let mut train = Vec::new();
    // (inference name, training sources, full shape)
    let mut logical: Vec<(String, Vec<String>, Vec<usize>)> = Vec::new();
    let mut i = 0;
    while i < params {
        let group = rng.gen_range(0..groups);
        let first = group * per_group;
        let size = if group == groups - 1 { train_ranks - first } else { per_group };
        let dims = if rng.gen_bool(0.2) { 1 } else { 2 };
        let shape: Vec<usize> = (0..dims).map(|_| 8 * rng.gen_range(1..=8)).collect();
        let fuse = dims == 2 && i + 1 < params && rng.gen_bool(0.25);
        let names: Vec<String> = if fuse { vec![format!("p{i}.q"), format!("p{i}.k")] } else { vec![format!("p{i}")] };
        let mut fused_shape = shape.clone();
        for name in &names {
            let mut s = shape.clone();
            if fuse {
                s[0] = 8 * rng.gen_range(1..=4);
            }
            let axis = rng.gen_range(0..dims);
            let counts: Vec<u32> = [1u32, 2, 4, 8].into_iter().filter(|&c| size % c == 0 && s[axis].is_multiple_of(c as usize)).collect();
            let count = counts[rng.gen_range(0..counts.len())];
            let stride = size / count;
            // Shards of unevenly sharded parameters start at a random rank.
            let rot = rng.gen_range(0..size);
            for index in 0..count {
                train.push(ParamMeta {
                    rank: first + (index * stride + rot) % size,
                    name: name.clone(),
                    shape: s.clone(),
                    dtype: DType::Bf16,
                    sharding: Sharding { mesh_group: group, axis, index, count },
                    offload: rng.gen_bool(0.3),
                    fused_from: vec![],
                });
            }
            if fuse {
                fused_shape = s;
            }
        }
        if fuse {
            let rows = train.iter().filter(|m| names.contains(&m.name) && m.sharding.index == 0).map(|m| m.shape[0]).sum();
            fused_shape[0] = rows;
            logical.push((format!("p{i}.qk"), names, fused_shape));
            i += 2;
        } else {
            logical.push((names[0].clone(), names, shape));
            i += 1;
        }
    }
    let mut infer = Vec::new();
    for (name, sources, shape) in logical {
        let axis = rng.gen_range(0..shape.len());
        let counts: Vec<u32> = [1u32, 2, 4].into_iter().filter(|&c| c <= infer_ranks && shape[axis] % c as usize == 0).collect();
        let count = counts[rng.gen_range(0..counts.len())];
        let dtype = if rng.gen_bool(0.3) { DType::Fp8 } else { DType::Bf16 };
        for rank in 0..infer_ranks {
            if rng.gen_bool(0.1) {
                continue;
            }
            infer.push(ParamMeta {
                rank,
                name: name.clone(),
                shape: shape.clone(),
                dtype,
                sharding: Sharding { mesh_group: 0, axis, index: rank % count, count },
                offload: false,
                fused_from: if sources.len() > 1 { sources.clone() } else { vec![] },
            });
        }
    }
    (train, infer)
}

fn prepared_bytes(m: &ParamMeta) -> u64 {
    let n: usize = m.shape.iter().product::<usize>() / m.sharding.count as usize;
    match m.dtype {
        DType::Bf16 => 2 * n as u64,
        DType::Fp8 => n as u64 + 4,
    }
}

/// Enumerates every (inference rank, parameter) pair and checks it is
/// served by exactly one destination entry, at the right offset and length,
/// from a rank holding the sources. Mesh groups must form contiguous runs.
pub fn check_coverage(train: &[ParamMeta], infer: &[ParamMeta], schedule: &TransferSchedule) -> CheckResult {
    let mut want: BTreeMap<(u32, String), (u64, u64, &ParamMeta)> = BTreeMap::new();
    let mut by_rank: BTreeMap<u32, Vec<&ParamMeta>> = BTreeMap::new();
    for m in infer {
        by_rank.entry(m.rank).or_default().push(m);
    }
    for (rank, mut metas) in by_rank {
        metas.sort_by(|a, b| a.name.cmp(&b.name));
        let mut off = 0u64;
        for m in metas {
            let len = prepared_bytes(m);
            want.insert((rank, m.name.clone()), (off, len, m));
            off = (off + len).div_ceil(64) * 64;
        }
    }
    let mut seen: HashMap<(u32, String), usize> = HashMap::new();
    for t in &schedule.tasks {
        for d in &t.dests {
            let key = (d.rank, t.param.clone());
            let &(off, len, m) = want.get(&key).ok_or(format!("task {} writes rank {} which does not want it", t.param, d.rank))?;
            *seen.entry(key).or_default() += 1;
            ensure!(d.offset == off, "{} on rank {}: offset {} expected {off}", t.param, d.rank, d.offset);
            ensure!(t.len == len, "{} on rank {}: len {} expected {len}", t.param, d.rank, t.len);
            let sh = m.sharding;
            ensure!(
                (t.prepare.axis, t.prepare.index, t.prepare.count, t.prepare.dtype) == (sh.axis, sh.index, sh.count, m.dtype),
                "{} on rank {}: wrong slice {:?}",
                t.param,
                d.rank,
                t.prepare
            );
        }
        let holds = |rank: u32, s: &String| train.iter().any(|m| m.name == *s && m.rank == rank);
        let full_holder = train.iter().any(|m| t.prepare.sources.iter().all(|s| holds(m.rank, s)));
        if full_holder {
            ensure!(
                t.prepare.sources.iter().all(|s| holds(t.source, s)),
                "task {} placed on rank {} which misses a source",
                t.param,
                t.source
            );
        } else {
            ensure!(
                t.prepare.sources.iter().any(|s| holds(t.source, s)),
                "task {} placed on rank {} which holds no source",
                t.param,
                t.source
            );
        }
    }
    for key in want.keys() {
        let n = seen.get(key).copied().unwrap_or(0);
        ensure!(n == 1, "rank {} parameter {} covered {n} times", key.0, key.1);
    }
    let mut done = HashSet::new();
    let mut prev = None;
    for t in &schedule.tasks {
        if prev != Some(t.mesh_group) {
            ensure!(done.insert(t.mesh_group), "mesh group {} is split into several segments", t.mesh_group);
            prev = Some(t.mesh_group);
        }
    }
    Ok(())
}

/// Within each mesh group, the most loaded source sends at most twice the
/// group mean, or a lower bound on the optimum plus the largest task when
/// tasks are too few or too coarse for that. The lower bound is the larger
/// of the mean and the bytes pinned to a rank because it is the only
/// candidate owner.
pub fn check_balance(train: &[ParamMeta], schedule: &TransferSchedule) -> CheckResult {
    let mut members: BTreeMap<u32, HashSet<u32>> = BTreeMap::new();
    let mut holders: HashMap<&str, HashSet<u32>> = HashMap::new();
    for m in train {
        members.entry(m.sharding.mesh_group).or_default().insert(m.rank);
        holders.entry(&m.name).or_default().insert(m.rank);
    }
    let load = schedule.load();
    for (g, ranks) in members {
        let tasks: Vec<_> = schedule.tasks.iter().filter(|t| t.mesh_group == g).collect();
        if tasks.is_empty() {
            continue;
        }
        let bytes = |t: &crate::weights::Task| t.len * t.dests.len() as u64;
        let total: u64 = tasks.iter().map(|t| bytes(t)).sum();
        let largest = tasks.iter().map(|t| bytes(t)).max().unwrap();
        let mut pinned: HashMap<u32, u64> = HashMap::new();
        for t in &tasks {
            let sets: Vec<&HashSet<u32>> = t.prepare.sources.iter().map(|s| &holders[s.as_str()]).collect();
            let mut can: HashSet<u32> = sets[0].iter().filter(|r| sets.iter().all(|h| h.contains(r))).copied().collect();
            if can.is_empty() {
                can = sets.iter().flat_map(|h| h.iter().copied()).collect();
            }
            if can.len() == 1 {
                *pinned.entry(*can.iter().next().unwrap()).or_default() += bytes(t);
            }
        }
        let mean = total as f64 / ranks.len() as f64;
        let lower = pinned.values().copied().max().unwrap_or(0) as f64;
        let max = ranks.iter().map(|r| load.get(r).copied().unwrap_or(0)).max().unwrap();
        let bound = (2.0 * mean).max(mean.max(lower) + largest as f64);
        ensure!(max as f64 <= bound, "mesh group {g}: max source load {max} over bound {bound:.0} (mean {mean:.0})");
    }
    Ok(())
}

/// Nearest e4m3 code by exhaustive search over all finite codes; ties go
/// to the even code.
pub fn e4m3_nearest(x: f32) -> u8 {
    fn decode(c: u8) -> f64 {
        let e = ((c >> 3) & 0xf) as i32;
        let m = (c & 7) as f64;
        if e == 0 {
            m * 2f64.powi(-9)
        } else {
            (8.0 + m) * 2f64.powi(e - 10)
        }
    }
    let a = (x as f64).abs();
    let mut best = 0u8;
    for c in 1u8..0x7f {
        let (d, b) = ((decode(c) - a).abs(), (decode(best) - a).abs());
        if d < b || (d == b && c % 2 == 0) {
            best = c;
        }
    }
    if x.is_sign_negative() {
        best | 0x80
    } else {
        best
    }
}

/// Scalar reference for `[scale f32 LE][codes]`.
pub fn reference_fp8(bf16: &[u8]) -> Vec<u8> {
    let vals: Vec<f32> = bf16.chunks_exact(2).map(|c| bf16_to_f32(u16::from_le_bytes([c[0], c[1]]))).collect();
    let amax = vals.iter().map(|v| v.abs()).fold(0f32, f32::max);
    let scale = if amax == 0.0 { 1.0 } else { amax / 448.0 };
    let mut out = scale.to_le_bytes().to_vec();
    out.extend(vals.iter().map(|v| e4m3_nearest(v / scale)));
    out
}

/// What inference rank `m.rank` should hold for `m`, computed element by
/// element from the synthetic generator.
pub fn expected_param(m: &ParamMeta, train: &[ParamMeta], step: u64) -> Vec<u8> {
    let sources = m.sources();
    // Fusion concatenates along axis 0, so the fused tensor is the sources
    // back to back.
    let mut fused: Vec<u16> = Vec::new();
    for s in &sources {
        let n: usize = train.iter().find(|t| t.name == *s).unwrap().shape.iter().product();
        fused.extend((0..n).map(|i| SyntheticWeights::element(s, step, i)));
    }
    let sh = m.sharding;
    let part = m.shape[sh.axis] / sh.count as usize;
    let strides: Vec<usize> = (0..m.shape.len()).map(|d| m.shape[d + 1..].iter().product()).collect();
    let mut out_shape = m.shape.clone();
    out_shape[sh.axis] = part;
    let n: usize = out_shape.iter().product();
    let mut picked = Vec::with_capacity(n);
    for flat in 0..n {
        let mut rem = flat;
        let mut src = 0;
        for d in 0..out_shape.len() {
            let below: usize = out_shape[d + 1..].iter().product();
            let mut idx = rem / below;
            rem %= below;
            if d == sh.axis {
                idx += sh.index as usize * part;
            }
            src += idx * strides[d];
        }
        picked.push(fused[src]);
    }
    let bytes: Vec<u8> = picked.iter().flat_map(|v| v.to_le_bytes()).collect();
    match m.dtype {
        DType::Bf16 => bytes,
        DType::Fp8 => reference_fp8(&bytes),
    }
}

pub struct StepRun {
    pub reports: Vec<StepReport>,
    pub events: Vec<TraceEvent>,
    pub engines: Vec<TransferEngine>,
    pub inference: Vec<InferenceRank>,
}

impl StepRun {
    pub fn shutdown(self) {
        for e in self.engines {
            e.shutdown();
        }
    }
}

/// Runs one step with `train_ranks` + `infer_ranks` engines on a fresh
/// fabric. Engines `e0..` are training ranks, the rest inference ranks.
#[allow(clippy::too_many_arguments)]
pub fn run_step(
    cfg: &FaultConfig,
    seed: u64,
    train_ranks: u32,
    infer_ranks: u32,
    train: &[ParamMeta],
    infer: &[ParamMeta],
    step: u64,
    watermark: u64,
    times: StageTimes,
) -> Result<StepRun, String> {
    let schedule = build_schedule(train, infer).map_err(|e| e.to_string())?;
    let (_f, trace, engines) = cluster(cfg, seed, (train_ranks + infer_ranks) as usize, 2);
    let inference: Vec<InferenceRank> = (0..infer_ranks)
        .map(|r| InferenceRank::new(&engines[(train_ranks + r) as usize], r, infer))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let dests: HashMap<u32, _> = inference.iter().map(|r| (r.rank, r.desc.clone())).collect();
    let source: Arc<dyn TensorSource> = Arc::new(SyntheticWeights::new(train, step));
    let barrier: Arc<dyn StepBarrier> = Arc::new(LocalBarrier::new(train_ranks as usize));
    let ranks: Vec<TrainRank> = (0..train_ranks)
        .map(|r| TrainRank {
            engine: engines[r as usize].clone(),
            rank: r,
            train: train.iter().filter(|m| m.sharding.index == 0).map(|m| (m.name.clone(), m.clone())).collect(),
            source: source.clone(),
            barrier: barrier.clone(),
            dests: dests.clone(),
        })
        .collect();
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = ranks.iter().map(|r| s.spawn(|| r.run_step(&schedule, watermark, times))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    Ok(StepRun { reports, events: trace.snapshot(), engines, inference })
}

fn rail_names(e: &TransferEngine) -> HashSet<String> {
    (0..e.groups()).flat_map(|g| e.group_addrs(g).iter().map(|a| a.to_string())).collect()
}

/// Peak of the `inflight` marks of each node.
pub fn inflight_peaks(events: &[TraceEvent]) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for e in events {
        if let TraceKind::Mark { node, label, value } = &e.kind {
            if label == "inflight" {
                let p = out.entry(node.clone()).or_insert(0);
                *p = (*p).max(*value);
            }
        }
    }
    out
}

/// Largest number of tasks between `task_start` and `task_done` marks at
/// once on any node.
pub fn max_concurrent_tasks(events: &[TraceEvent]) -> usize {
    let mut live: HashMap<&str, usize> = HashMap::new();
    let mut max = 0;
    for e in events {
        if let TraceKind::Mark { node, label, .. } = &e.kind {
            let n = live.entry(node).or_default();
            match label.as_str() {
                "task_start" => *n += 1,
                "task_done" => *n -= 1,
                _ => {}
            }
            max = max.max(*n);
        }
    }
    max
}

/// Inference engines never post and never receive a message.
pub fn check_one_sided(events: &[TraceEvent], inference: &[&TransferEngine]) -> CheckResult {
    let names: HashSet<String> = inference.iter().flat_map(|e| rail_names(e)).collect();
    let mut writes = 0;
    for e in events {
        match &e.kind {
            TraceKind::Post { from, .. } => ensure!(!names.contains(from), "inference rail {from} posted a request"),
            TraceKind::MsgDelivered { at, from, .. } if names.contains(at) => {
                ensure!(false, "inference rail {at} received a message from {from}")
            }
            TraceKind::WriteApplied { at, .. } if names.contains(at) => writes += 1,
            _ => {}
        }
    }
    ensure!(writes > 0, "no write reached an inference rank");
    Ok(())
}

pub fn check_delivered(run: &StepRun, train: &[ParamMeta], infer: &[ParamMeta], step: u64) -> CheckResult {
    for m in infer {
        let rank = &run.inference[m.rank as usize];
        let got = rank.param(&m.name).ok_or(format!("rank {} has no slot for {}", m.rank, m.name))?;
        let want = expected_param(m, train, step);
        if got != want {
            let at = got.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(got.len().min(want.len()));
            return Err(format!("rank {} {} ({:?}) differs at byte {at}", m.rank, m.name, m.dtype));
        }
    }
    Ok(())
}

/// Random metadata over 4 training and 2 inference ranks in two mesh
/// groups, transferred under a watermark of a few tasks.
pub fn fidelity(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, infer) = random_metas(&mut rng, 12, 4, 2, 2);
    let schedule = build_schedule(&train, &infer).map_err(|e| e.to_string())?;
    let largest = schedule.tasks.iter().map(|t| t.temp_bytes()).max().unwrap_or(1);
    let watermark = largest * 2;
    let run = run_step(cfg, seed, 4, 2, &train, &infer, seed, watermark, StageTimes::default())?;
    check_delivered(&run, &train, &infer, seed)?;
    for (node, peak) in inflight_peaks(&run.events) {
        ensure!(peak <= watermark, "{node}: {peak} bytes in flight over watermark {watermark}");
    }
    let inference: Vec<&TransferEngine> = run.engines[4..].iter().collect();
    check_one_sided(&run.events, &inference)?;
    let tasks: usize = run.reports.iter().map(|r| r.tasks).sum();
    ensure!(tasks == schedule.tasks.len(), "ran {tasks} of {} tasks", schedule.tasks.len());
    run.shutdown();
    Ok(())
}

/// Equal-size parameters with a watermark of exactly one task: never more
/// than one task in flight.
pub fn sequential_watermark(cfg: &FaultConfig, seed: u64) -> CheckResult {
    let train: Vec<ParamMeta> = (0..6)
        .map(|i| ParamMeta {
            rank: 0,
            name: format!("w{i}"),
            shape: vec![32, 16],
            dtype: DType::Bf16,
            sharding: Sharding::whole(0),
            offload: false,
            fused_from: vec![],
        })
        .collect();
    let infer: Vec<ParamMeta> = train.iter().map(|m| ParamMeta { rank: 0, ..m.clone() }).collect();
    let schedule = build_schedule(&train, &infer).map_err(|e| e.to_string())?;
    let watermark = schedule.tasks[0].temp_bytes();
    let run = run_step(cfg, seed, 1, 1, &train, &infer, 3, watermark, StageTimes::default())?;
    check_delivered(&run, &train, &infer, 3)?;
    let max = max_concurrent_tasks(&run.events);
    ensure!(max == 1, "{max} tasks in flight under a one-task watermark");
    ensure!(run.reports[0].peak_inflight == watermark, "peak {} vs watermark {watermark}", run.reports[0].peak_inflight);
    run.shutdown();
    Ok(())
}

/// Eight offloaded tasks, every stage padded to `stage`. Returns the wall
/// time of the step.
pub fn pipelined_step(stage: Duration) -> Result<Duration, String> {
    let train: Vec<ParamMeta> = (0..8)
        .map(|i| ParamMeta {
            rank: 0,
            name: format!("layer{i}"),
            shape: vec![64, 64],
            dtype: DType::Bf16,
            sharding: Sharding::whole(0),
            offload: true,
            fused_from: vec![],
        })
        .collect();
    let infer: Vec<ParamMeta> = train.iter().map(|m| ParamMeta { offload: false, ..m.clone() }).collect();
    let run = run_step(&FaultConfig::default(), 1, 1, 1, &train, &infer, 0, u64::MAX, StageTimes::uniform(stage))?;
    check_delivered(&run, &train, &infer, 0)?;
    let wall = Duration::from_secs_f64(run.reports[0].wall_ms / 1e3);
    run.shutdown();
    Ok(wall)
}
