use transfer_engine::conformance::cluster;
use transfer_engine::conformance::moe::{self, StepInput};
use transfer_engine::moe::{MoeError, RoutingSpec};
use transfer_engine::trace::TraceKind;
use transfer_engine::transport::sim::{FabricMode, FaultConfig};

#[test]
fn moe_invariants_hold_in_every_fabric_mode() {
    let mut failures = Vec::new();
    for mode in FabricMode::ALL {
        for seed in [1, 7, 42] {
            for (name, r) in moe::run_all(&mode.config(), seed) {
                if let Err(e) = r {
                    failures.push(format!("{mode:?} seed {seed}: {name}: {e}"));
                }
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn dispatch_combine_match_the_all_to_all_oracle_over_the_grid() {
    let (points, failures) = moe::equivalence_grid(&FabricMode::WindowRandom.config(), 20);
    assert_eq!(points, 2 * 3 * 16 * 3 + 16 * 3 * 2);
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

fn small(ranks: usize, experts: usize, tokens: usize, topk: usize, private: usize) -> RoutingSpec {
    RoutingSpec { ranks, experts, tokens, topk, token_bytes: 16, dim: 4, private, ..RoutingSpec::default() }
}

fn token(r: u8, t: u8) -> Vec<u8> {
    let mut v = vec![r; 16];
    v[1] = t;
    v
}

#[test]
fn single_token_to_a_remote_expert() {
    let spec = RoutingSpec { node_size: Some(1), ..small(2, 4, 4, 1, 2) };
    let (_f, _t, engines) = cluster(&FaultConfig::default(), 3, 2, 1);
    let mut ranks = moe::build_ranks(&engines, &spec).unwrap();
    let input = StepInput { tokens: vec![token(0, 0), vec![]], routes: vec![vec![vec![3]], vec![]], weights: vec![vec![1.0], vec![]] };
    let out = moe::run_step(&mut ranks, &input).unwrap();
    let (p1, _) = &out[1];
    assert_eq!(p1.groups.iter().map(|g| g.rows).sum::<usize>(), 1);
    let g = p1.groups.iter().find(|g| g.expert == 3).unwrap();
    assert_eq!((g.rows, g.padded), (1, 8));
    assert_eq!(p1.row(g.start), &token(0, 0)[..]);
    assert!(out[0].0.groups.iter().all(|g| g.rows == 0));
    assert_eq!(out[0].1, moe::expert_fn(3, &token(0, 0), 4));
    assert!(out[1].1.is_empty());
}

#[test]
fn identity_expert_round_trips_weighted_tokens() {
    // Two ranks on separate nodes, each token sent to one expert per rank.
    let spec = RoutingSpec { node_size: Some(1), ..small(2, 4, 3, 2, 1) };
    let (_f, _t, engines) = cluster(&FaultConfig::default(), 5, 2, 2);
    let mut ranks = moe::build_ranks(&engines, &spec).unwrap();
    let tokens: Vec<Vec<u8>> = (0..2u8).map(|r| (0..3u8).flat_map(|t| token(r + 10, t * 20)).collect()).collect();
    let routes = vec![vec![vec![0, 2], vec![1, 3], vec![0, 3]]; 2];
    let weights = vec![vec![0.25, 0.75, 0.5, 0.5, 1.0, 0.0]; 2];
    std::thread::scope(|s| {
        for (r, rank) in ranks.iter_mut().enumerate() {
            let (tokens, routes, weights) = (&tokens[r], &routes[r], &weights[r]);
            s.spawn(move || {
                rank.dispatch_send(tokens, routes).unwrap();
                let packed = rank.dispatch_recv().unwrap();
                // Identity on the first four bytes.
                let out: Vec<f32> =
                    (0..packed.rows()).flat_map(|i| packed.row(i)[..4].iter().map(|&b| b as f32).collect::<Vec<_>>()).collect();
                rank.combine_send(&packed, &out).unwrap();
                let got = rank.combine_recv(weights).unwrap();
                let want: Vec<f32> = tokens.chunks(16).flat_map(|t| t[..4].iter().map(|&b| b as f32).collect::<Vec<_>>()).collect();
                assert_eq!(got, want, "rank {r}");
            });
        }
    });
}

#[test]
fn all_speculative_step_skips_the_second_write() {
    // P = T and one expert per token: every token fits the private slot.
    let spec = RoutingSpec { node_size: Some(1), ..small(2, 2, 4, 1, 4) };
    let (_f, trace, engines) = cluster(&FaultConfig::default(), 9, 2, 1);
    let mut ranks = moe::build_ranks(&engines, &spec).unwrap();
    let input = StepInput {
        tokens: vec![(0..4).flat_map(|t| token(0, t)).collect(), (0..4).flat_map(|t| token(1, t)).collect()],
        routes: vec![vec![vec![1]; 4], vec![vec![0]; 4]],
        weights: vec![vec![1.0; 4]; 2],
    };
    trace.clear();
    let out = moe::run_step(&mut ranks, &input).unwrap();
    for (p, _) in &out {
        assert_eq!(p.groups.iter().map(|g| g.rows).sum::<usize>(), 4);
    }
    let tokens_imm = |r: u32| spec.imm_base + 256 + r;
    let second: Vec<u64> = trace
        .snapshot()
        .iter()
        .filter_map(|e| match &e.kind {
            TraceKind::Post { len, imm: Some(i), .. } if *i == tokens_imm(0) => Some(*len),
            _ => None,
        })
        .collect();
    assert!(second.is_empty(), "{second:?}");
}

#[test]
fn calls_out_of_order_are_rejected() {
    let spec = small(2, 4, 2, 2, 1);
    let (_f, _t, engines) = cluster(&FaultConfig::default(), 1, 2, 1);
    let mut ranks = moe::build_ranks(&engines, &spec).unwrap();
    let r = &mut ranks[0];
    assert!(matches!(r.dispatch_recv(), Err(MoeError::Sequence(_))));
    assert!(matches!(r.combine_recv(&[]), Err(MoeError::Sequence(_))));
    let three: Vec<u8> = vec![0; 48];
    assert!(matches!(r.dispatch_send(&three, &[vec![0, 1], vec![0, 1], vec![0, 1]]), Err(MoeError::TooManyTokens { got: 3, max: 2 })));
    assert!(matches!(r.dispatch_send(&three[..16], &[vec![2, 2]]), Err(MoeError::DuplicateExpert { token: 0, expert: 2 })));
    assert!(matches!(r.dispatch_send(&three[..16], &[vec![0, 9]]), Err(MoeError::Routes(_))));
}
