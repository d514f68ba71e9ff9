//! Point-to-point transfer engine: one-sided writes with immediate-value
//! completion counting over reliable but unordered rails, multi-rail
//! sharding, and the protocols built on it (KV cache transfer, weight
//! transfer, MoE dispatch/combine).
//!
//! ```
//! use transfer_engine::transport::sim::{FaultConfig, SimFabric};
//! use transfer_engine::{Device, DeviceBuffer, EngineConfig, OnDone, TransferEngine};
//!
//! # fn main() -> Result<(), Box<dyn std::error::Error>> {
//! let fabric = SimFabric::new(FaultConfig::default(), 1);
//! let a = TransferEngine::new(&*fabric, EngineConfig::named("a").rails(2))?;
//! let b = TransferEngine::new(&*fabric, EngineConfig::named("b").rails(2))?;
//!
//! let src = DeviceBuffer::from_bytes(&[7u8; 4096]);
//! let dst = DeviceBuffer::new(4096);
//! let (h, _) = a.reg_mr(&src, Device::Gpu(0))?;
//! let (_, desc) = b.reg_mr(&dst, Device::Gpu(0))?;
//!
//! let (on_recv, received) = OnDone::flag();
//! b.expect_imm_count(42, 1, on_recv)?;
//! a.submit_single_write(4096, Some(42), (h, 0), (&desc, 0), OnDone::Ignore)?;
//! received.wait()?;
//! assert_eq!(dst.to_vec(), src.to_vec());
//! # Ok(())
//! # }
//! ```

pub mod bench;
pub mod bootstrap;
pub mod conformance;
pub mod engine;
pub mod error;
pub mod kvcache;
pub mod mem;
pub mod moe;
pub mod trace;
pub mod transport;
pub mod types;
pub mod vclock;
pub mod weights;
pub mod wire;

pub use engine::{EngineConfig, RecvMsg, TransferEngine, WatchWord};
pub use error::{Result, TransferError};
pub use mem::DeviceBuffer;
pub use trace::{Trace, TraceEvent, TraceKind};
pub use types::{Device, DoneFlag, MrDesc, MrHandle, NetAddr, OnDone, Pages, PeerGroupHandle, ScatterDst};
