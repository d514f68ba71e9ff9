use std::collections::HashMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transfer_engine::conformance::weights::{self as wc, check_balance, check_coverage, random_metas, reference_fp8};
use transfer_engine::transport::sim::{FabricMode, FaultConfig};
use transfer_engine::weights::tensor::f32_to_bf16;
use transfer_engine::weights::{build_schedule, prepare, simulate_pipeline, DType, ParamMeta, Prepare, Sharding, StageTimes, WeightsError};

fn meta(rank: u32, name: &str, shape: &[usize], sharding: Sharding) -> ParamMeta {
    ParamMeta { rank, name: name.into(), shape: shape.to_vec(), dtype: DType::Bf16, sharding, offload: false, fused_from: vec![] }
}

fn fsdp(name: &str, shape: &[usize], ranks: u32, group: u32, first: u32) -> Vec<ParamMeta> {
    (0..ranks).map(|i| meta(first + i, name, shape, Sharding { mesh_group: group, axis: 0, index: i, count: ranks })).collect()
}

#[test]
fn weight_invariants_hold_in_every_fabric_mode() {
    let mut failures = Vec::new();
    for mode in FabricMode::ALL {
        for seed in [1, 7, 42] {
            for (name, r) in wc::run_all(&mode.config(), seed) {
                if let Err(e) = r {
                    failures.push(format!("{mode:?} seed {seed}: {name}: {e}"));
                }
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn random_schedules_cover_every_pair_exactly_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let params = rng.gen_range(1..=64);
        let groups = rng.gen_range(1..=2);
        let (train, infer) = random_metas(&mut rng, params, 8, 4, groups);
        let s = build_schedule(&train, &infer).unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        check_coverage(&train, &infer, &s).unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        check_balance(&train, &s).unwrap_or_else(|e| panic!("trial {trial}: {e}"));
    }
}

#[test]
fn one_param_two_inference_ranks_is_one_task() {
    let train = vec![meta(0, "w", &[4, 4], Sharding::whole(0))];
    let infer = vec![meta(0, "w", &[4, 4], Sharding::whole(0)), meta(1, "w", &[4, 4], Sharding::whole(0))];
    let s = build_schedule(&train, &infer).unwrap();
    assert_eq!(s.tasks.len(), 1);
    assert_eq!(s.tasks[0].dests.len(), 2);
    assert_eq!(s.tasks[0].len, 32);
}

#[test]
fn fsdp_param_goes_to_a_single_owner() {
    let train = fsdp("w", &[8, 4], 4, 0, 0);
    let infer = vec![meta(0, "w", &[8, 4], Sharding::whole(0))];
    let s = build_schedule(&train, &infer).unwrap();
    assert_eq!(s.tasks.len(), 1);
    assert!(s.tasks[0].source < 4);
    check_coverage(&train, &infer, &s).unwrap();
}

#[test]
fn mesh_groups_form_contiguous_segments() {
    let mut train = Vec::new();
    for i in 0..4 {
        train.extend(fsdp(&format!("a{i}"), &[8, 8 * (i + 1)], 2, 0, 0));
        train.extend(fsdp(&format!("b{i}"), &[8, 8 * (4 - i)], 2, 1, 2));
    }
    let infer: Vec<ParamMeta> =
        train.iter().filter(|m| m.sharding.index == 0).map(|m| meta(0, &m.name, &m.shape, Sharding::whole(0))).collect();
    let s = build_schedule(&train, &infer).unwrap();
    let groups: Vec<u32> = s.tasks.iter().map(|t| t.mesh_group).collect();
    assert_eq!(groups, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    assert_eq!(s.mesh_groups(), vec![0, 1]);
    // Largest first inside a group.
    assert!(s.tasks[..4].windows(2).all(|w| w[0].len >= w[1].len));
    check_coverage(&train, &infer, &s).unwrap();
}

#[test]
fn schedule_errors() {
    let train = vec![meta(0, "w", &[4, 4], Sharding::whole(0))];
    let missing = vec![meta(0, "v", &[4, 4], Sharding::whole(0))];
    match build_schedule(&train, &missing) {
        Err(WeightsError::MissingParam(n)) => assert_eq!(n, "v"),
        other => panic!("{other:?}"),
    }
    let wrong_shape = vec![meta(0, "w", &[4, 8], Sharding::whole(0))];
    assert!(matches!(build_schedule(&train, &wrong_shape), Err(WeightsError::ShapeMismatch { .. })));
    let mut holey = fsdp("w", &[8, 4], 4, 0, 0);
    holey.remove(2);
    match build_schedule(&holey, &train) {
        Err(WeightsError::MissingShard { name, index }) => assert_eq!((name.as_str(), index), ("w", 2)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn watermark_below_the_largest_task_is_rejected() {
    let train = vec![meta(0, "w", &[16, 16], Sharding::whole(0))];
    let infer = train.clone();
    let s = build_schedule(&train, &infer).unwrap();
    let need = s.tasks[0].temp_bytes();
    match wc::run_step(&FaultConfig::default(), 1, 1, 1, &train, &infer, 0, need - 1, StageTimes::default()) {
        Err(e) => assert!(e.contains("watermark"), "{e}"),
        Ok(_) => panic!("admitted a task above the watermark"),
    }
}

fn train_map(metas: &[ParamMeta]) -> HashMap<String, ParamMeta> {
    metas.iter().map(|m| (m.name.clone(), m.clone())).collect()
}

#[test]
fn prepare_reassembles_row_shards() {
    let train = train_map(&fsdp("w", &[4, 4], 2, 0, 0));
    let full: Vec<u8> = (0..32).collect();
    let shards = vec![vec![full[..16].to_vec(), full[16..].to_vec()]];
    let prep = Prepare { sources: vec!["w".into()], shape: vec![4, 4], axis: 0, index: 0, count: 1, dtype: DType::Bf16 };
    assert_eq!(prepare(&prep, &train, &shards).unwrap(), full);
    // Missing shard.
    let short = vec![vec![full[..16].to_vec()]];
    assert!(matches!(prepare(&prep, &train, &short), Err(WeightsError::MissingShard { .. })));
}

#[test]
fn prepare_fuses_in_listed_order() {
    let train = train_map(&[meta(0, "q", &[4, 4], Sharding::whole(0)), meta(0, "k", &[4, 4], Sharding::whole(0))]);
    let q: Vec<u8> = vec![1; 32];
    let k: Vec<u8> = vec![2; 32];
    let prep = Prepare { sources: vec!["k".into(), "q".into()], shape: vec![8, 4], axis: 0, index: 0, count: 1, dtype: DType::Bf16 };
    let out = prepare(&prep, &train, &vec![vec![k.clone()], vec![q.clone()]]).unwrap();
    assert_eq!(out, [k, q].concat());
}

#[test]
fn fp8_prepare_matches_the_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let train = train_map(&[meta(0, "w", &[64, 64], Sharding::whole(0))]);
    for _ in 0..4 {
        let vals: Vec<u8> =
            (0..64 * 64).flat_map(|_| f32_to_bf16(rng.gen_range(-3.0f32..3.0) * 2f32.powi(rng.gen_range(-12..4))).to_le_bytes()).collect();
        let prep = Prepare { sources: vec!["w".into()], shape: vec![64, 64], axis: 0, index: 0, count: 1, dtype: DType::Fp8 };
        let got = prepare(&prep, &train, &vec![vec![vals.clone()]]).unwrap();
        let want = reference_fp8(&vals);
        assert_eq!(got.len(), 4 + 64 * 64);
        assert_eq!(got[..4], want[..4], "scale");
        let diffs = got.iter().zip(&want).skip(4).filter(|(a, b)| a != b).count();
        assert_eq!(diffs, 0);
    }
}

#[test]
fn pipelined_step_beats_the_sequential_bound() {
    let t = Duration::from_millis(10);
    assert_eq!(simulate_pipeline(8, [t; 4], 8), Duration::from_millis(110));
    assert_eq!(simulate_pipeline(8, [t; 4], 1), Duration::from_millis(320));
    let wall = wc::pipelined_step(t).unwrap();
    assert!(wall < Duration::from_millis(200), "step took {wall:?}");
}
