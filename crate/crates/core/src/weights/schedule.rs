//! Static transfer schedule built once from parameter metadata.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::WeightsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    Bf16,
    Fp8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Bf16 => 2,
            DType::Fp8 => 1,
        }
    }
}

/// Which slice of the full tensor a rank holds: `index` of `count` equal
/// slices along `axis`. `count == 1` means unsharded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sharding {
    pub mesh_group: u32,
    pub axis: usize,
    pub index: u32,
    pub count: u32,
}

impl Sharding {
    pub fn whole(mesh_group: u32) -> Self {
        Self { mesh_group, axis: 0, index: 0, count: 1 }
    }
}

/// What one rank reports about one parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub rank: u32,
    pub name: String,
    /// Full (unsharded) shape.
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub sharding: Sharding,
    /// Training side: the shard lives in host memory between steps.
    pub offload: bool,
    /// Inference side: this parameter is the concatenation along axis 0 of
    /// these training parameters. Empty means the same name.
    pub fused_from: Vec<String>,
}

impl ParamMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Bytes of this rank's slice as stored on the inference side; fp8
    /// carries a 4-byte scale in front.
    pub fn prepared_len(&self) -> u64 {
        let n = self.numel() / self.sharding.count as usize;
        let scale = if self.dtype == DType::Fp8 { 4 } else { 0 };
        (n * self.dtype.size() + scale) as u64
    }

    pub fn sources(&self) -> Vec<String> {
        if self.fused_from.is_empty() {
            vec![self.name.clone()]
        } else {
            self.fused_from.clone()
        }
    }
}

/// Offsets of the parameters of one inference rank inside its weight
/// region, by name. Parameters are packed in name order, 64-byte aligned.
pub fn inference_layout(metas: &[&ParamMeta]) -> (BTreeMap<String, (u64, u64)>, u64) {
    let mut sorted: Vec<&&ParamMeta> = metas.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = BTreeMap::new();
    let mut off = 0u64;
    for m in sorted {
        let len = m.prepared_len();
        out.insert(m.name.clone(), (off, len));
        off = (off + len).div_ceil(64) * 64;
    }
    (out, off)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dest {
    pub rank: u32,
    pub offset: u64,
}

/// How the source rank turns training shards into the bytes it sends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prepare {
    /// Training parameters reconstructed and concatenated along axis 0.
    pub sources: Vec<String>,
    /// Shape after fusion.
    pub shape: Vec<usize>,
    /// Inference-side slice of the fused tensor.
    pub axis: usize,
    pub index: u32,
    pub count: u32,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub param: String,
    pub mesh_group: u32,
    /// Training rank that reconstructs, prepares and writes.
    pub source: u32,
    pub dests: Vec<Dest>,
    /// Bytes after preparation, written to every destination.
    pub len: u64,
    pub prepare: Prepare,
    /// Bytes of the reconstructed (pre-preparation) tensor.
    pub full_bytes: u64,
}

impl Task {
    /// Temporary memory the task holds while in flight.
    pub fn temp_bytes(&self) -> u64 {
        self.full_bytes + self.len
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSchedule {
    pub tasks: Vec<Task>,
}

impl TransferSchedule {
    pub fn for_rank(&self, rank: u32) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(move |t| t.source == rank)
    }

    pub fn mesh_groups(&self) -> Vec<u32> {
        let mut g: Vec<u32> = self.tasks.iter().map(|t| t.mesh_group).collect();
        g.dedup();
        g
    }

    /// Bytes each training rank sends.
    pub fn load(&self) -> BTreeMap<u32, u64> {
        let mut out = BTreeMap::new();
        for t in &self.tasks {
            *out.entry(t.source).or_default() += t.len * t.dests.len() as u64;
        }
        out
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for t in &self.tasks {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct TrainParam<'a> {
    shape: &'a [usize],
    dtype: DType,
    group: u32,
    holders: BTreeSet<u32>,
}

fn train_params(train: &[ParamMeta]) -> Result<HashMap<&str, TrainParam<'_>>, WeightsError> {
    let mut by_name: HashMap<&str, Vec<&ParamMeta>> = HashMap::new();
    for m in train {
        by_name.entry(&m.name).or_default().push(m);
    }
    let mut out = HashMap::new();
    for (name, metas) in by_name {
        let first = metas[0];
        let sh = first.sharding;
        let mismatch = |detail: String| WeightsError::ShapeMismatch { name: name.to_string(), detail };
        if sh.count == 0 || sh.axis >= first.shape.len() || first.shape[sh.axis] % sh.count as usize != 0 {
            return Err(mismatch(format!("{:?} not divisible into {} slices on axis {}", first.shape, sh.count, sh.axis)));
        }
        let mut seen = vec![false; sh.count as usize];
        for m in &metas {
            let s = m.sharding;
            if m.shape != first.shape || m.dtype != first.dtype {
                return Err(mismatch(format!("shards disagree: {:?} vs {:?}", m.shape, first.shape)));
            }
            if (s.mesh_group, s.axis, s.count) != (sh.mesh_group, sh.axis, sh.count) || s.index >= s.count {
                return Err(mismatch(format!("inconsistent sharding {s:?} vs {sh:?}")));
            }
            if std::mem::replace(&mut seen[s.index as usize], true) {
                return Err(mismatch(format!("shard {} reported twice", s.index)));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(WeightsError::MissingShard { name: name.to_string(), index: i as u32 });
        }
        out.insert(
            name,
            TrainParam { shape: &first.shape, dtype: first.dtype, group: sh.mesh_group, holders: metas.iter().map(|m| m.rank).collect() },
        );
    }
    Ok(out)
}

/// Maps every (inference rank, parameter) pair to exactly one task.
/// Inference ranks needing identical bytes share a task. Tasks are ordered by
/// (mesh group, size descending, name). Each goes to the least loaded
/// training rank holding a shard of it (of every source, when one exists),
/// placing the tasks with the fewest candidate owners first.
pub fn build_schedule(train: &[ParamMeta], infer: &[ParamMeta]) -> Result<TransferSchedule, WeightsError> {
    let params = train_params(train)?;
    let mut per_rank: BTreeMap<u32, Vec<&ParamMeta>> = BTreeMap::new();
    for m in infer {
        per_rank.entry(m.rank).or_default().push(m);
    }
    let mut offsets: HashMap<(u32, &str), u64> = HashMap::new();
    for (rank, metas) in &per_rank {
        let mut names = BTreeSet::new();
        for m in metas {
            if !names.insert(m.name.as_str()) {
                return Err(WeightsError::ShapeMismatch { name: m.name.clone(), detail: format!("listed twice on inference rank {rank}") });
            }
        }
        let (layout, _) = inference_layout(metas);
        for m in metas {
            offsets.insert((*rank, m.name.as_str()), layout[&m.name].0);
        }
    }

    // Inference ranks needing identical prepared bytes form one task.
    type Key = (String, usize, u32, u32, DType);
    let mut groups: BTreeMap<Key, (Prepare, u32, BTreeSet<u32>, u64)> = BTreeMap::new();
    for m in infer {
        let sources = m.sources();
        let mut shape: Option<Vec<usize>> = None;
        let mut group = None;
        let mut full_bytes = 0u64;
        for s in &sources {
            let p = params.get(s.as_str()).ok_or_else(|| WeightsError::MissingParam(s.clone()))?;
            if p.dtype != DType::Bf16 {
                return Err(WeightsError::ShapeMismatch { name: s.clone(), detail: "training weights must be bf16".into() });
            }
            full_bytes += (p.shape.iter().product::<usize>() * p.dtype.size()) as u64;
            shape = Some(match shape {
                None => p.shape.to_vec(),
                Some(mut acc) => {
                    if acc.len() != p.shape.len() || acc[1..] != p.shape[1..] {
                        return Err(WeightsError::ShapeMismatch {
                            name: m.name.clone(),
                            detail: format!("cannot fuse {:?} with {:?}", acc, p.shape),
                        });
                    }
                    acc[0] += p.shape[0];
                    acc
                }
            });
            if *group.get_or_insert(p.group) != p.group {
                return Err(WeightsError::ShapeMismatch { name: m.name.clone(), detail: "fused sources span mesh groups".into() });
            }
        }
        let shape = shape.ok_or_else(|| WeightsError::MissingParam(m.name.clone()))?;
        if shape != m.shape {
            return Err(WeightsError::ShapeMismatch {
                name: m.name.clone(),
                detail: format!("inference expects {:?}, training provides {:?}", m.shape, shape),
            });
        }
        let sh = m.sharding;
        if sh.count == 0 || sh.index >= sh.count || sh.axis >= shape.len() || shape[sh.axis] % sh.count as usize != 0 {
            return Err(WeightsError::ShapeMismatch { name: m.name.clone(), detail: format!("bad inference sharding {sh:?}") });
        }
        let key = (m.name.clone(), sh.axis, sh.index, sh.count, m.dtype);
        let entry = groups.entry(key).or_insert_with(|| {
            let prep = Prepare { sources, shape, axis: sh.axis, index: sh.index, count: sh.count, dtype: m.dtype };
            (prep, group.unwrap(), BTreeSet::new(), full_bytes)
        });
        entry.2.insert(m.rank);
    }

    let mut tasks: Vec<Task> = groups
        .into_iter()
        .map(|((name, ..), (prep, group, ranks, full_bytes))| {
            let len = ParamMeta {
                rank: 0,
                name: name.clone(),
                shape: prep.shape.clone(),
                dtype: prep.dtype,
                sharding: Sharding { mesh_group: group, axis: prep.axis, index: prep.index, count: prep.count },
                offload: false,
                fused_from: vec![],
            }
            .prepared_len();
            let dests = ranks.iter().map(|&r| Dest { rank: r, offset: offsets[&(r, name.as_str())] }).collect();
            Task { param: name, mesh_group: group, source: 0, dests, len, prepare: prep, full_bytes }
        })
        .collect();
    tasks.sort_by(|a, b| {
        (a.mesh_group, std::cmp::Reverse(a.len * a.dests.len() as u64), &a.param, a.prepare.index).cmp(&(
            b.mesh_group,
            std::cmp::Reverse(b.len * b.dests.len() as u64),
            &b.param,
            b.prepare.index,
        ))
    });

    // Owners are assigned most constrained first, then largest first;
    // execution order stays as sorted above.
    let candidates: Vec<BTreeSet<u32>> = tasks
        .iter()
        .map(|t| {
            // Prefer ranks holding a shard of every fused source.
            let sets: Vec<&BTreeSet<u32>> = t.prepare.sources.iter().map(|s| &params[s.as_str()].holders).collect();
            let all: BTreeSet<u32> = sets[0].iter().filter(|r| sets.iter().all(|h| h.contains(r))).copied().collect();
            if all.is_empty() {
                sets.iter().flat_map(|h| h.iter().copied()).collect()
            } else {
                all
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by_key(|&i| (candidates[i].len(), std::cmp::Reverse(tasks[i].len * tasks[i].dests.len() as u64), i));
    let mut load: BTreeMap<u32, u64> = train.iter().map(|m| (m.rank, 0)).collect();
    for i in order {
        let t = &mut tasks[i];
        let owner = *candidates[i].iter().min_by_key(|r| (load[r], **r)).expect("parameter without holders");
        *load.get_mut(&owner).unwrap() += t.len * t.dests.len() as u64;
        t.source = owner;
    }
    Ok(TransferSchedule { tasks })
}
