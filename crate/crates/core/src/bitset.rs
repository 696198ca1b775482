//! Packed bitsets over example indices.
//!
//! Flip sets are stored as fixed-width bitsets so that group flip rates
//! reduce to union + popcount, which keeps exhaustive oracle checks cheap.

const BITS: usize = 64;

/// Fixed-length bitset backed by `u64` blocks.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct BitSet {
    len: usize,
    blocks: Vec<u64>,
}

impl BitSet {
    /// Empty bitset over `len` positions.
    pub fn new(len: usize) -> Self {
        BitSet {
            len,
            blocks: vec![0; len.div_ceil(BITS)],
        }
    }

    /// Bitset with the given positions set.
    pub fn from_indices(len: usize, indices: &[u32]) -> Self {
        let mut set = BitSet::new(len);
        for &i in indices {
            set.insert(i as usize);
        }
        set
    }

    /// Bitset with every position set.
    pub fn full(len: usize) -> Self {
        let mut set = BitSet::new(len);
        for block in &mut set.blocks {
            *block = u64::MAX;
        }
        set.clear_tail();
        set
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.blocks[i / BITS] |= 1 << (i % BITS);
    }

    pub fn contains(&self, i: usize) -> bool {
        if i >= self.len {
            return false;
        }
        self.blocks[i / BITS] & (1 << (i % BITS)) != 0
    }

    pub fn count_ones(&self) -> usize {
        self.blocks.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// In-place union with another bitset of the same length.
    pub fn union_with(&mut self, other: &BitSet) {
        assert_eq!(self.len, other.len, "bitset length mismatch");
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            *a |= b;
        }
    }

    /// In-place intersection with another bitset of the same length.
    pub fn intersect_with(&mut self, other: &BitSet) {
        assert_eq!(self.len, other.len, "bitset length mismatch");
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            *a &= b;
        }
    }

    /// `|self n other|`.
    pub fn intersection_count(&self, other: &BitSet) -> usize {
        assert_eq!(self.len, other.len, "bitset length mismatch");
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// `|self \ other|`: the number of set bits not present in `other`.
    pub fn difference_count(&self, other: &BitSet) -> usize {
        assert_eq!(self.len, other.len, "bitset length mismatch");
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| (a & !b).count_ones() as usize)
            .sum()
    }

    /// Iterate over set bit positions in ascending order.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().enumerate().flat_map(|(bi, &block)| {
            let base = bi * BITS;
            let mut rest = block;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let tz = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(base + tz)
            })
        })
    }

    /// Run-length encoding: alternating run lengths starting with a
    /// (possibly zero) run of clear bits. Runs always sum to `len`.
    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for i in 0..self.len {
            let bit = self.contains(i);
            if bit == current {
                run += 1;
            } else {
                runs.push(run);
                current = bit;
                run = 1;
            }
        }
        runs.push(run);
        runs
    }

    /// Inverse of [`BitSet::to_runs`].
    pub fn from_runs(len: usize, runs: &[u32]) -> Self {
        let mut set = BitSet::new(len);
        let mut pos = 0usize;
        let mut value = false;
        for &run in runs {
            if value {
                for i in pos..pos + run as usize {
                    set.insert(i);
                }
            }
            pos += run as usize;
            value = !value;
        }
        assert_eq!(pos, len, "run lengths must sum to the bitset length");
        set
    }

    fn clear_tail(&mut self) {
        let tail = self.len % BITS;
        if tail != 0 {
            if let Some(last) = self.blocks.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
    }
}
