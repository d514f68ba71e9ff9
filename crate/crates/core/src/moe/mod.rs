//! MoE dispatch and combine over one-sided writes.
//!
//! Every rank first scatters its per-expert route counts together with up
//! to `private` tokens per destination into fixed private slots (the
//! speculative round). Once all route rows are in, each rank derives the
//! receive layout of every destination and writes the remaining tokens
//! into the destination's contiguous buffer. Combine sends expert outputs
//! back to their origin in one write per peer and the origin averages them
//! locally. Ranks on the same node use the shared-memory lane instead of
//! the network.

mod layout;
mod rank;
mod shm;

pub use layout::{compute_layout, count_routes, DispatchLayout, RouteMatrix};
pub use rank::{ExpertGroup, MoeRank, MoeStats, Packed, PhaseTimes};
pub use shm::{ShmCounter, ShmNode, ShmPeer};

use std::time::Duration;

use crate::error::TransferError;

#[derive(Debug, thiserror::Error)]
pub enum MoeError {
    #[error("{got} tokens exceed the per-rank maximum of {max}")]
    TooManyTokens { got: usize, max: usize },
    #[error("token {token} routes to expert {expert} twice")]
    DuplicateExpert { token: usize, expert: u32 },
    #[error("bad routes: {0}")]
    Routes(String),
    #[error("layout needs {need} slots, capacity is {capacity}")]
    Capacity { need: usize, capacity: usize },
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("{phase} timed out waiting for sources {missing:?}")]
    Timeout { phase: &'static str, missing: Vec<usize> },
    #[error("call out of order: {0}")]
    Sequence(&'static str),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

#[derive(Debug, Clone)]
pub struct RoutingSpec {
    pub ranks: usize,
    pub experts: usize,
    /// Maximum tokens per rank and step.
    pub tokens: usize,
    /// Experts per token.
    pub topk: usize,
    /// Dispatch payload per token (hidden bytes plus scales).
    pub token_bytes: usize,
    /// f32 elements per expert output returned by combine.
    pub dim: usize,
    /// Speculative tokens per source in each destination's private slot.
    pub private: usize,
    /// Ranks per node; `None` means half the ranks (at least one).
    pub node_size: Option<usize>,
    /// Rows of each expert group are padded to a multiple of this.
    pub pad: usize,
    /// Shared-memory lane copy rate used for model time.
    pub shm_bytes_per_sec: u64,
    pub imm_base: u32,
    pub timeout: Duration,
}

impl Default for RoutingSpec {
    fn default() -> Self {
        Self {
            ranks: 2,
            experts: 4,
            tokens: 16,
            topk: 2,
            token_bytes: 256 + 8 * 4,
            dim: 64,
            private: 32,
            node_size: None,
            pad: 8,
            shm_bytes_per_sec: 150_000_000_000,
            imm_base: 1 << 20,
            timeout: Duration::from_secs(30),
        }
    }
}

impl RoutingSpec {
    pub fn experts_per_rank(&self) -> usize {
        self.experts / self.ranks
    }

    /// Token slots of the contiguous receive buffer: N·T·max(R, E/N).
    pub fn capacity(&self) -> usize {
        self.ranks * self.tokens * self.topk.max(self.experts_per_rank())
    }

    pub fn node_size(&self) -> usize {
        self.node_size.unwrap_or(self.ranks / 2).clamp(1, self.ranks.max(1))
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.node_size()
    }

    /// Most token copies one source can send one destination.
    pub fn max_per_dest(&self) -> usize {
        self.tokens * self.topk.min(self.experts_per_rank())
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        let bad = |m: String| Err(MoeError::Config(m));
        if self.ranks == 0 || self.ranks > 256 {
            return bad(format!("{} ranks", self.ranks));
        }
        if !self.experts.is_multiple_of(self.ranks) || self.experts == 0 {
            return bad(format!("{} experts do not divide over {} ranks", self.experts, self.ranks));
        }
        if self.topk == 0 || self.topk > self.experts {
            return bad(format!("top-{} of {} experts", self.topk, self.experts));
        }
        if self.pad == 0 || self.token_bytes == 0 {
            return bad("zero padding multiple or token size".into());
        }
        Ok(())
    }
}
