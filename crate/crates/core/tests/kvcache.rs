use transfer_engine::conformance::kvcache;
use transfer_engine::transport::sim::FabricMode;

#[test]
fn kv_transfer_invariants_hold_in_every_fabric_mode() {
    let mut failures = Vec::new();
    for mode in FabricMode::ALL {
        for seed in [1, 7, 42] {
            for (name, r) in kvcache::run_all(&mode.config(), seed) {
                if let Err(e) = r {
                    failures.push(format!("{mode:?} seed {seed}: {name}: {e}"));
                }
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

mod dispatch {
    use std::time::Duration;

    use transfer_engine::kvcache::{Decoder, HeadSlice, KvConfig, KvOutcome, PrefillTarget, Prefiller};
    use transfer_engine::transport::sim::{FaultConfig, SimFabric};
    use transfer_engine::{EngineConfig, TransferEngine, TransferError};

    fn pair(kv: &KvConfig) -> (TransferEngine, TransferEngine, Prefiller, Decoder) {
        let fabric = SimFabric::new(FaultConfig::default(), 5);
        let p = TransferEngine::new(&*fabric, EngineConfig::named("p")).unwrap();
        let d = TransferEngine::new(&*fabric, EngineConfig::named("d")).unwrap();
        let pre = Prefiller::new(p.clone(), kv.clone(), HeadSlice::full(kv.page_bytes)).unwrap();
        let dec = Decoder::new(d.clone(), kv.clone()).unwrap();
        (p, d, pre, dec)
    }

    #[test]
    fn no_prefiller_is_a_scheduling_error() {
        let kv = KvConfig { page_bytes: 1024, pages: 4, ..KvConfig::default() };
        let (_p, _d, _pre, dec) = pair(&kv);
        assert!(matches!(dec.dispatch(1, 1, 1, vec![]), Err(TransferError::Invalid(_))));
    }

    #[test]
    fn context_without_registered_buffer_is_rejected() {
        let kv = KvConfig { page_bytes: 1024, pages: 4, context_bytes: 0, ..KvConfig::default() };
        let (p, _d, _pre, dec) = pair(&kv);
        let t = PrefillTarget { addr: p.main_address(), slice: HeadSlice::full(1024), context: true };
        assert_eq!(dec.dispatch(1, 1, 1, vec![t]).err(), Some(TransferError::UnknownRegion));
    }

    #[test]
    fn zero_layer_model_transfers_only_the_context() {
        let kv = KvConfig { layers: 0, page_bytes: 1024, pages: 4, context_bytes: 64, ..KvConfig::default() };
        let (p, _d, pre, dec) = pair(&kv);
        let t = PrefillTarget { addr: p.main_address(), slice: HeadSlice::full(1024), context: true };
        let r = dec.dispatch(3, 1, 1, vec![t]).unwrap();
        assert!(matches!(r.wait(Duration::from_secs(30)), Some(KvOutcome::Ready { .. })));
        assert_eq!(pre.stats().writes, 1);
        let want: Vec<u8> = (0..64).map(|i| transfer_engine::kvcache::context_byte(r.id, i)).collect();
        assert_eq!(dec.context(r.context_slot.unwrap(), 64), want);
    }
}
