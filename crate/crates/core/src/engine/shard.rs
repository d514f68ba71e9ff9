//! Rail assignment for multi-request operations.

/// Rail of each of `pages` pages, starting at rail `start` and rotating.
/// Per-rail counts differ by at most one.
pub fn page_rails(pages: usize, rails: usize, start: usize) -> impl Iterator<Item = usize> {
    (0..pages).map(move |i| (start + i) % rails)
}

/// Splits `len` bytes into at most `rails` contiguous chunks of near-equal
/// size (sizes differ by at most one byte). Returns `(rail, offset, len)`.
pub fn split_even(len: usize, rails: usize) -> Vec<(usize, usize, usize)> {
    let rails = rails.max(1).min(len.max(1));
    let (q, r) = (len / rails, len % rails);
    let mut out = Vec::with_capacity(rails);
    let mut off = 0;
    for rail in 0..rails {
        let n = q + usize::from(rail < r);
        out.push((rail, off, n));
        off += n;
    }
    out
}

/// Cuts `(offset, len)` pieces larger than `max` into `max`-sized parts.
pub fn cap_pieces(pieces: Vec<(usize, usize, usize)>, max: usize) -> Vec<(usize, usize, usize)> {
    let max = max.max(1);
    let mut out = Vec::with_capacity(pieces.len());
    for (rail, off, len) in pieces {
        if len <= max {
            out.push((rail, off, len));
            continue;
        }
        let mut done = 0;
        while done < len {
            let n = max.min(len - done);
            out.push((rail, off + done, n));
            done += n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_pages_on_four_rails() {
        let mut counts = [0; 4];
        for r in page_rails(8, 4, 3) {
            counts[r] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
    }

    #[test]
    fn even_split_covers_exactly() {
        for len in [0usize, 1, 5, 1 << 20, (32 << 20) + 3] {
            for rails in 1..=4 {
                let parts = split_even(len, rails);
                assert_eq!(parts.iter().map(|p| p.2).sum::<usize>(), len);
                let mut off = 0;
                for p in &parts {
                    assert_eq!(p.1, off);
                    off += p.2;
                }
                let (lo, hi) = (parts.iter().map(|p| p.2).min().unwrap(), parts.iter().map(|p| p.2).max().unwrap());
                assert!(hi - lo <= 1);
            }
        }
    }

    #[test]
    fn capping_preserves_coverage() {
        let parts = cap_pieces(vec![(0, 0, 10), (1, 10, 3)], 4);
        assert_eq!(parts, vec![(0, 0, 4), (0, 4, 4), (0, 8, 2), (1, 10, 3)]);
    }
}
