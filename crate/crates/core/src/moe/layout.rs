//! Route counting and the receive layout every rank derives from the
//! exchanged route counts.

use super::{MoeError, RoutingSpec};

/// `counts[source][expert]`: tokens `source` sends to `expert` this step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteMatrix {
    ranks: usize,
    experts: usize,
    counts: Vec<u32>,
}

impl RouteMatrix {
    pub fn new(ranks: usize, experts: usize) -> Self {
        Self { ranks, experts, counts: vec![0; ranks * experts] }
    }

    pub fn get(&self, source: usize, expert: usize) -> u32 {
        self.counts[source * self.experts + expert]
    }

    pub fn row(&self, source: usize) -> &[u32] {
        &self.counts[source * self.experts..(source + 1) * self.experts]
    }

    pub fn set_row(&mut self, source: usize, row: &[u32]) {
        self.counts[source * self.experts..(source + 1) * self.experts].copy_from_slice(row);
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    /// Token copies `source` sends to rank `dest`.
    pub fn to_rank(&self, spec: &RoutingSpec, source: usize, dest: usize) -> u32 {
        let epr = spec.experts_per_rank();
        self.row(source)[dest * epr..(dest + 1) * epr].iter().sum()
    }
}

/// Checks one rank's routes and counts them per expert.
pub fn count_routes(spec: &RoutingSpec, routes: &[Vec<u32>]) -> Result<Vec<u32>, MoeError> {
    if routes.len() > spec.tokens {
        return Err(MoeError::TooManyTokens { got: routes.len(), max: spec.tokens });
    }
    let mut counts = vec![0u32; spec.experts];
    for (t, r) in routes.iter().enumerate() {
        if r.len() != spec.topk {
            return Err(MoeError::Routes(format!("token {t} has {} experts, expected {}", r.len(), spec.topk)));
        }
        for (i, &e) in r.iter().enumerate() {
            if e as usize >= spec.experts {
                return Err(MoeError::Routes(format!("token {t} routes to expert {e} of {}", spec.experts)));
            }
            if r[..i].contains(&e) {
                return Err(MoeError::DuplicateExpert { token: t, expert: e });
            }
            counts[e as usize] += 1;
        }
    }
    Ok(counts)
}

/// Where the tokens bound for one destination rank go.
///
/// Ranges are in receive order, ordered by (source, local expert), so one
/// source's tokens for a destination are a single dense run and can travel
/// in one write. The first `private[s]` tokens of source `s` travel
/// speculatively into its private slot instead; their positions in the
/// contiguous buffer stay unused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchLayout {
    pub dest: usize,
    /// `ranges[source][local expert] = (start, len)` in token slots.
    pub ranges: Vec<Vec<(u32, u32)>>,
    pub private: Vec<u32>,
    pub total: u32,
}

impl DispatchLayout {
    /// First slot and token count of `source`'s run.
    pub fn source_run(&self, source: usize) -> (u32, u32) {
        let r = &self.ranges[source];
        let start = r.first().map_or(0, |x| x.0);
        (start, r.iter().map(|x| x.1).sum())
    }
}

/// Deterministic given the matrix, so every rank computes the same layout
/// for every destination.
pub fn compute_layout(spec: &RoutingSpec, m: &RouteMatrix, dest: usize) -> Result<DispatchLayout, MoeError> {
    let epr = spec.experts_per_rank();
    let per_source = (spec.tokens * spec.topk) as u64;
    let mut ranges = Vec::with_capacity(m.ranks());
    let mut private = Vec::with_capacity(m.ranks());
    let mut next = 0u64;
    for s in 0..m.ranks() {
        let row_total: u64 = m.row(s).iter().map(|&c| c as u64).sum();
        if row_total > per_source {
            return Err(MoeError::Routes(format!("source {s} routes {row_total} tokens, at most {per_source}")));
        }
        let mut rs = Vec::with_capacity(epr);
        for le in 0..epr {
            let c = m.get(s, dest * epr + le);
            if c as usize > spec.tokens {
                return Err(MoeError::Routes(format!("source {s} sends {c} tokens to expert {}", dest * epr + le)));
            }
            rs.push((next as u32, c));
            next += c as u64;
        }
        private.push(m.to_rank(spec, s, dest).min(spec.private as u32));
        ranges.push(rs);
    }
    if next > spec.capacity() as u64 {
        return Err(MoeError::Capacity { need: next as usize, capacity: spec.capacity() });
    }
    Ok(DispatchLayout { dest, ranges, private, total: next as u32 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, e: usize, t: usize, r: usize) -> RoutingSpec {
        RoutingSpec { ranks: n, experts: e, tokens: t, topk: r, ..RoutingSpec::default() }
    }

    #[test]
    fn empty_matrix_gives_empty_ranges() {
        let s = spec(2, 4, 8, 2);
        let l = compute_layout(&s, &RouteMatrix::new(2, 4), 1).unwrap();
        assert_eq!(l.total, 0);
        assert!(l.ranges.iter().flatten().all(|r| r.1 == 0));
    }

    #[test]
    fn two_sources_one_expert_are_prefix_sums() {
        let s = spec(2, 2, 8, 1);
        let mut m = RouteMatrix::new(2, 2);
        m.set_row(0, &[3, 0]);
        m.set_row(1, &[5, 0]);
        let l = compute_layout(&s, &m, 0).unwrap();
        assert_eq!(l.ranges[0][0], (0, 3));
        assert_eq!(l.ranges[1][0], (3, 5));
        assert_eq!(l.total, 8);
    }

    #[test]
    fn paper_capacity_bound() {
        assert_eq!(spec(64, 256, 128, 8).capacity(), 65536);
    }

    #[test]
    fn route_validation() {
        let s = spec(2, 4, 2, 2);
        assert!(matches!(count_routes(&s, &[vec![1, 1]]), Err(MoeError::DuplicateExpert { token: 0, expert: 1 })));
        assert!(matches!(count_routes(&s, &[vec![0, 1], vec![0, 1], vec![0, 1]]), Err(MoeError::TooManyTokens { got: 3, max: 2 })));
        assert_eq!(count_routes(&s, &[vec![0, 3], vec![3, 2]]).unwrap(), vec![1, 0, 1, 2]);
    }

    #[test]
    fn oversized_rows_are_rejected() {
        let s = spec(2, 2, 2, 1);
        let mut m = RouteMatrix::new(2, 2);
        m.set_row(0, &[3, 0]);
        assert!(compute_layout(&s, &m, 0).is_err());
    }
}
