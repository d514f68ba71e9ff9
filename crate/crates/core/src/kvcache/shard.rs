//! Mapping between prefiller and decoder KV sharding.
//!
//! Pages are laid out heads first: a page holds every head of its tokens
//! back to back, so any contiguous run of heads is one contiguous byte range
//! inside the page.

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardMode {
    /// Every rank holds the full (compressed) cache; ranks are matched.
    Mla,
    /// Each rank holds a contiguous slice of the heads.
    Gqa,
}

/// Byte range of a page held by one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSlice {
    pub offset: u64,
    pub len: u64,
}

impl HeadSlice {
    pub fn full(page_bytes: u64) -> Self {
        Self { offset: 0, len: page_bytes }
    }
}

/// Head slices of `ranks` GQA ranks over `heads` heads of `head_bytes` each.
pub fn gqa_slices(heads: u32, head_bytes: u64, ranks: u32) -> Vec<HeadSlice> {
    assert!(ranks > 0 && heads.is_multiple_of(ranks), "{heads} heads over {ranks} ranks");
    let per = (heads / ranks) as u64 * head_bytes;
    (0..ranks as u64).map(|r| HeadSlice { offset: r * per, len: per }).collect()
}

/// MLA replica matching: the prefiller rank each decoder rank pulls its copy
/// from. Ranks are shuffled so replicas are spread randomly; prefiller loads
/// differ by at most one, and equal rank counts give a bijection.
pub fn match_replicas(prefill_ranks: usize, decode_ranks: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(prefill_ranks > 0);
    let mut order: Vec<usize> = (0..prefill_ranks).collect();
    order.shuffle(rng);
    let mut out: Vec<usize> = (0..decode_ranks).map(|d| order[d % prefill_ranks]).collect();
    out.shuffle(rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gqa_slices_tile_the_page() {
        let s = gqa_slices(8, 128, 4);
        assert_eq!(s[0], HeadSlice { offset: 0, len: 256 });
        assert_eq!(s[3], HeadSlice { offset: 768, len: 256 });
    }

    #[test]
    fn equal_rank_counts_match_bijectively() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..9 {
            let mut m = match_replicas(n, n, &mut rng);
            m.sort();
            assert_eq!(m, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn unequal_counts_balance_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = match_replicas(3, 8, &mut rng);
        let mut load = [0; 3];
        for p in m {
            load[p] += 1;
        }
        assert!(load.iter().max().unwrap() - load.iter().min().unwrap() <= 1);
    }
}
