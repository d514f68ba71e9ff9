//! Disaggregated prefill/decode KV cache transfer.
//!
//! The decoder allocates pages and an immediate value, arms an expectation
//! for the number of transfers it will receive and sends a
//! [`PrefillRequest`] to one or more prefillers. A prefiller's compute thread
//! bumps a watcher word after every (chunk, layer); the watcher callback
//! turns each step into a paged write of that layer's pages for the chunk.
//! After the last step the context is copied with a single write. Decoding
//! starts when the expectation fires; there is no completion message.
//!
//! Cancellation is decoder initiated and confirmed by the prefiller once it
//! stopped issuing and every issued write completed. Heartbeats in both
//! directions let either side drop requests whose peer went silent.

mod decoder;
mod msg;
mod prefiller;
mod shard;

pub use decoder::{Decoder, KvOutcome, KvRequest, PrefillTarget};
pub use msg::{ContextTarget, KvMsg, PrefillRequest};
pub use prefiller::{PrefillStats, Prefiller};
pub use shard::{gqa_slices, match_replicas, HeadSlice, ShardMode};

use std::time::Duration;

#[derive(Debug, Clone)]
pub struct KvConfig {
    pub layers: u32,
    /// Bytes of one full page (all heads).
    pub page_bytes: u64,
    /// Pages per layer in the node's pool.
    pub pages: u32,
    pub context_bytes: u64,
    /// Concurrent requests per node; bounds context slots.
    pub max_requests: u32,
    pub heartbeat: Duration,
    pub missed_heartbeats: u32,
    /// Simulated compute time per (chunk, layer) on the prefiller.
    pub layer_time: Duration,
    pub imm_base: u32,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            page_bytes: 64 << 10,
            pages: 64,
            context_bytes: 4096,
            max_requests: 16,
            heartbeat: Duration::from_millis(100),
            missed_heartbeats: 3,
            layer_time: Duration::ZERO,
            imm_base: 1 << 16,
        }
    }
}

impl KvConfig {
    pub fn layer_stride(&self) -> u64 {
        self.pages as u64 * self.page_bytes
    }

    pub fn kv_bytes(&self) -> u64 {
        self.layers as u64 * self.layer_stride()
    }

    pub fn heartbeat_timeout(&self) -> Duration {
        self.heartbeat * self.missed_heartbeats
    }
}

const RECV_SLOTS: usize = 32;
const MSG_BYTES: usize = 64 << 10;

/// Content a prefiller produces for byte `byte` (within the full page) of
/// the `pos`-th page of request `id` in `layer`.
pub fn kv_byte(id: u64, layer: u32, pos: u32, byte: u64) -> u8 {
    let mut x = id.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((layer as u64) << 40 | (pos as u64) << 20).wrapping_add(byte / 8);
    x ^= x >> 29;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 32;
    (x >> ((byte % 8) * 8)) as u8
}

/// Context bytes a prefiller produces for request `id`.
pub fn context_byte(id: u64, i: u64) -> u8 {
    kv_byte(!id, u32::MAX, 0, i)
}
