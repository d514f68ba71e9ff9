use transfer_engine::conformance::engine;
use transfer_engine::transport::sim::FabricMode;

const SEEDS: [u64; 3] = [1, 7, 42];

#[test]
fn engine_invariants_hold_in_every_fabric_mode() {
    let mut failures = Vec::new();
    for mode in FabricMode::ALL {
        for seed in SEEDS {
            for (name, r) in engine::run_all(&mode.config(), seed) {
                if let Err(e) = r {
                    failures.push(format!("{mode:?} seed {seed}: {name}: {e}"));
                }
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn imm_counter_stress() {
    let cfg = FabricMode::WindowRandom.config();
    let report = engine::imm_counter(&cfg, 3, 10_000, 256, 4).unwrap();
    assert_eq!(report.fired_once, 256);
    assert_eq!(report.armed_late_fired_immediately, 128);
}

#[test]
fn paged_writes_balance_across_rails() {
    for rails in [1, 2, 4] {
        engine::paged_balance(&FabricMode::WindowRandom.config(), rails as u64, rails, &[1, 2, 3, 5, 8, 63, 64, 65, 1023, 1024]).unwrap();
    }
}
