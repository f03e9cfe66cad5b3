use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PartitionError {
    #[error("cannot split {n_cells} cells over {n_ranks} ranks")]
    TooManyRanks { n_cells: u64, n_ranks: u32 },
    #[error("need at least one rank")]
    NoRanks,
    #[error("cell interval [{start}, {end}) outside mesh of {n_cells} cells")]
    OutOfRange { start: u64, end: u64, n_cells: u64 },
}

/// Contiguous block partition of `[0, n_cells)` over server ranks.
///
/// Block sizes differ by at most one; the remainder goes to the lowest ranks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMap {
    n_cells: u64,
    boundaries: Vec<u64>,
}

impl PartitionMap {
    pub fn build(n_cells: u64, n_ranks: u32) -> Result<Self, PartitionError> {
        if n_ranks == 0 {
            return Err(PartitionError::NoRanks);
        }
        if u64::from(n_ranks) > n_cells {
            return Err(PartitionError::TooManyRanks { n_cells, n_ranks });
        }
        let r = u64::from(n_ranks);
        let base = n_cells / r;
        let rem = n_cells % r;
        let mut boundaries = Vec::with_capacity(n_ranks as usize + 1);
        let mut acc = 0;
        boundaries.push(0);
        for k in 0..r {
            acc += base + u64::from(k < rem);
            boundaries.push(acc);
        }
        Ok(PartitionMap {
            n_cells,
            boundaries,
        })
    }

    pub fn n_cells(&self) -> u64 {
        self.n_cells
    }

    pub fn n_ranks(&self) -> u32 {
        (self.boundaries.len() - 1) as u32
    }

    pub fn boundaries(&self) -> &[u64] {
        &self.boundaries
    }

    pub fn range_of(&self, rank: u32) -> Range<u64> {
        let r = rank as usize;
        self.boundaries[r]..self.boundaries[r + 1]
    }

    pub fn rank_of(&self, cell: u64) -> Option<u32> {
        if cell >= self.n_cells {
            return None;
        }
        Some((self.boundaries.partition_point(|&b| b <= cell) - 1) as u32)
    }

    /// Splits `cells` into ordered, disjoint per-rank sub-intervals covering
    /// it exactly. An empty interval routes to nothing.
    pub fn route(&self, cells: Range<u64>) -> Result<Vec<(u32, Range<u64>)>, PartitionError> {
        if cells.start > cells.end || cells.end > self.n_cells {
            return Err(PartitionError::OutOfRange {
                start: cells.start,
                end: cells.end,
                n_cells: self.n_cells,
            });
        }
        let mut out = Vec::new();
        if cells.is_empty() {
            return Ok(out);
        }
        let mut rank = self.rank_of(cells.start).expect("checked above");
        let mut start = cells.start;
        while start < cells.end {
            let block_end = self.boundaries[rank as usize + 1];
            let end = block_end.min(cells.end);
            out.push((rank, start..end));
            start = end;
            rank += 1;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn even_and_uneven_splits() {
        assert_eq!(PartitionMap::build(10, 2).unwrap().boundaries(), &[0, 5, 10]);
        assert_eq!(PartitionMap::build(10, 3).unwrap().boundaries(), &[0, 4, 7, 10]);
        let big = PartitionMap::build(6_002_400, 8).unwrap();
        for r in 0..8 {
            let b = big.range_of(r);
            assert_eq!(b.end - b.start, 750_300);
        }
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            PartitionMap::build(3, 4),
            Err(PartitionError::TooManyRanks { .. })
        ));
        assert!(matches!(PartitionMap::build(3, 0), Err(PartitionError::NoRanks)));
    }

    #[test]
    fn route_examples() {
        let map = PartitionMap::build(10, 2).unwrap();
        assert_eq!(map.route(3..8).unwrap(), vec![(0, 3..5), (1, 5..8)]);
        assert_eq!(map.route(6..9).unwrap(), vec![(1, 6..9)]);
        assert_eq!(map.route(0..5).unwrap(), vec![(0, 0..5)]);
        assert!(map.route(8..11).is_err());
        assert_eq!(map.rank_of(5), Some(1));
        assert_eq!(map.rank_of(10), None);
    }

    proptest! {
        #[test]
        fn blocks_are_balanced(n_cells in 1u64..5000, ranks in 1u32..64) {
            prop_assume!(u64::from(ranks) <= n_cells);
            let map = PartitionMap::build(n_cells, ranks).unwrap();
            let b = map.boundaries();
            prop_assert_eq!(b[0], 0);
            prop_assert_eq!(*b.last().unwrap(), n_cells);
            let sizes: Vec<u64> = b.windows(2).map(|w| w[1] - w[0]).collect();
            prop_assert!(sizes.iter().all(|&s| s > 0));
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn routing_is_a_partition(
            n_cells in 1u64..2000,
            ranks in 1u32..40,
            a in 0u64..2000,
            b in 0u64..2000,
        ) {
            prop_assume!(u64::from(ranks) <= n_cells);
            let map = PartitionMap::build(n_cells, ranks).unwrap();
            let (lo, hi) = (a.min(b) % (n_cells + 1), a.max(b) % (n_cells + 1));
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            let routed = map.route(lo..hi).unwrap();
            // interval-cover oracle: walk every cell
            let mut covered = Vec::new();
            for (rank, sub) in &routed {
                prop_assert!(!sub.is_empty());
                for c in sub.clone() {
                    prop_assert_eq!(map.rank_of(c), Some(*rank));
                    covered.push(c);
                }
            }
            prop_assert_eq!(covered, (lo..hi).collect::<Vec<_>>());
        }
    }
}
