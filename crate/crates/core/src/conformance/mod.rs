//! Invariant suites runnable against any fabric configuration.
//!
//! Each check builds its own engines on a fresh simulated fabric, drives a
//! scenario, and compares the outcome against an independent oracle
//! (usually a plain in-order copy). They return a description of the first
//! violation instead of panicking so harnesses can report per mode and seed.

pub mod engine;
pub mod kvcache;
pub mod moe;
pub mod weights;

use std::sync::Arc;
use std::time::Duration;

use crate::transport::sim::{FaultConfig, SimFabric};
use crate::types::DoneFlag;
use crate::{EngineConfig, Trace, TransferEngine};

pub type CheckResult = Result<(), String>;

pub(crate) const WAIT: Duration = Duration::from_secs(60);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !{ $cond } {
            return Err(format!($($fmt)+));
        }
    };
}
pub(crate) use ensure;

pub(crate) fn wait(flag: &DoneFlag, what: &str) -> CheckResult {
    match flag.wait_timeout(WAIT) {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(format!("{what}: {e}")),
        None => Err(format!("{what}: timed out")),
    }
}

/// `n` engines named `e0..` on one simulated fabric sharing a trace.
pub fn cluster(cfg: &FaultConfig, seed: u64, n: usize, rails: usize) -> (Arc<SimFabric>, Arc<Trace>, Vec<TransferEngine>) {
    let trace = Arc::new(Trace::new());
    let fabric = SimFabric::with_trace(cfg.clone(), seed, trace.clone());
    let engines = (0..n)
        .map(|i| {
            TransferEngine::new(&*fabric, EngineConfig::named(format!("e{i}")).rails(rails).trace(Some(trace.clone()))).expect("engine")
        })
        .collect();
    (fabric, trace, engines)
}

pub(crate) fn pattern(seed: u64, len: usize) -> Vec<u8> {
    let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x as u8
        })
        .collect()
}

/// Waits until every callback queued on `engine` before this call has run.
pub(crate) fn drain_callbacks(engine: &TransferEngine) -> CheckResult {
    let flag = DoneFlag::new();
    let f = flag.clone();
    engine.expect_imm_count(u32::MAX, 0, crate::types::OnDone::callback(move |r| f.complete(r, 0))).map_err(|e| e.to_string())?;
    wait(&flag, "callback queue")
}
