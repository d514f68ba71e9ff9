use std::sync::Arc;
use std::time::Duration;

use transfer_engine::conformance::kvcache::decoder_session;
use transfer_engine::kvcache::{Decoder, HeadSlice, KvConfig, PrefillTarget, Prefiller};
use transfer_engine::mem::DeviceBuffer;
use transfer_engine::transport::socket::{SocketConfig, UdpTransport};
use transfer_engine::types::{Device, OnDone};
use transfer_engine::{EngineConfig, Trace, TransferEngine};

fn engine(t: &UdpTransport, name: &str, rails: usize, trace: &Arc<Trace>) -> TransferEngine {
    TransferEngine::new(t, EngineConfig::named(name).rails(rails).trace(Some(trace.clone()))).unwrap()
}

#[test]
fn split_write_with_imm_over_lossy_udp() {
    let trace = Arc::new(Trace::new());
    let t = UdpTransport::with_trace(SocketConfig { drop_rate: 0.05, dup_rate: 0.05, seed: 3, ..SocketConfig::default() }, trace.clone());
    let a = engine(&t, "a", 2, &trace);
    let b = engine(&t, "b", 2, &trace);
    let len = 3 << 20;
    let src = DeviceBuffer::new(len);
    let data: Vec<u8> = (0..len).map(|i| (i * 7 + i / 4096) as u8).collect();
    src.write(0, &data);
    let dst = DeviceBuffer::new(len);
    let (hs, _) = a.reg_mr(&src, Device::Host).unwrap();
    let (_hd, dd) = b.reg_mr(&dst, Device::Host).unwrap();
    let (od, arrived) = OnDone::flag();
    b.expect_imm_count(77, 1, od).unwrap();
    let (od, sent) = OnDone::flag();
    a.submit_single_write(len as u64, Some(77), (hs, 0), (&dd, 0), od).unwrap();
    sent.wait_timeout(Duration::from_secs(30)).expect("send completion").unwrap();
    arrived.wait_timeout(Duration::from_secs(30)).expect("imm").unwrap();
    assert_eq!(dst.read_vec(0, len), data);
    a.shutdown();
    b.shutdown();
}

#[test]
fn kv_transfer_over_udp() {
    let kv = KvConfig { layers: 4, page_bytes: 16 << 10, pages: 32, layer_time: Duration::from_millis(1), ..KvConfig::default() };
    let pt = Arc::new(Trace::new());
    let dt = Arc::new(Trace::new());
    let ps = UdpTransport::new(SocketConfig::default());
    let ds = UdpTransport::with_trace(SocketConfig::default(), dt.clone());
    let pe = engine(&ps, "p", 2, &pt);
    let de = engine(&ds, "d", 2, &dt);
    let pre = Prefiller::new(pe.clone(), kv.clone(), HeadSlice::full(kv.page_bytes)).unwrap();
    let dec = Decoder::new(de.clone(), kv.clone()).unwrap();
    let target = PrefillTarget { addr: pe.main_address(), slice: HeadSlice::full(kv.page_bytes), context: true };
    for (name, r) in decoder_session(&dec, &dt, &target, 4) {
        r.unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    assert_eq!(pre.stats().cancelled, 1);
    dec.shutdown();
    pre.shutdown();
    pe.shutdown();
    de.shutdown();
}
