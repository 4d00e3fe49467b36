use std::collections::BTreeMap;

/// Tracks unused inode ids in a partition range as disjoint inclusive
/// intervals so the smallest free id is found in O(log n).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdAllocator {
    free: BTreeMap<u64, u64>,
}

impl IdAllocator {
    pub fn new(start: u64, end: u64) -> Self {
        let mut free = BTreeMap::new();
        if start <= end {
            free.insert(start, end);
        }
        Self { free }
    }

    /// Rebuilds the free set of `[start, end]` minus `used` (ascending).
    pub fn from_used(start: u64, end: u64, used: impl IntoIterator<Item = u64>) -> Self {
        let mut free = BTreeMap::new();
        let mut cursor = Some(start);
        for id in used {
            let Some(c) = cursor else { break };
            if id < c || id > end {
                continue;
            }
            if id > c {
                free.insert(c, id - 1);
            }
            cursor = id.checked_add(1);
        }
        if let Some(c) = cursor {
            if c <= end {
                free.insert(c, end);
            }
        }
        Self { free }
    }

    pub fn smallest(&self) -> Option<u64> {
        self.free.keys().next().copied()
    }

    pub fn alloc(&mut self) -> Option<u64> {
        let (&s, &e) = self.free.iter().next()?;
        self.free.remove(&s);
        if s < e {
            self.free.insert(s + 1, e);
        }
        Some(s)
    }

    /// Marks one specific id as used. Returns false if it was not free.
    pub fn take(&mut self, id: u64) -> bool {
        let Some((&s, &e)) = self.free.range(..=id).next_back() else { return false };
        if id > e {
            return false;
        }
        self.free.remove(&s);
        if s < id {
            self.free.insert(s, id - 1);
        }
        if id < e {
            self.free.insert(id + 1, e);
        }
        true
    }

    pub fn release(&mut self, id: u64) {
        let mut s = id;
        let mut e = id;
        if let Some((&ps, &pe)) = self.free.range(..id).next_back() {
            if pe >= id {
                return;
            }
            if pe.checked_add(1) == Some(id) {
                self.free.remove(&ps);
                s = ps;
            }
        }
        if let Some(next) = id.checked_add(1) {
            if let Some(ne) = self.free.remove(&next) {
                e = ne;
            }
        }
        self.free.insert(s, e);
    }

    /// Drops every free id above `end`.
    pub fn clamp(&mut self, end: u64) {
        let above: Vec<u64> = self.free.range(end.saturating_add(1)..).map(|(s, _)| *s).collect();
        for s in above {
            self.free.remove(&s);
        }
        if let Some((&s, e)) = self.free.iter_mut().next_back() {
            if *e > end {
                *e = end;
            }
            debug_assert!(s <= *e);
        }
    }

    pub fn is_free(&self, id: u64) -> bool {
        self.free.range(..=id).next_back().is_some_and(|(_, &e)| id <= e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn allocates_smallest_and_reuses_released() {
        let mut a = IdAllocator::new(1, 100);
        assert_eq!(a.alloc(), Some(1));
        assert_eq!(a.alloc(), Some(2));
        assert_eq!(a.alloc(), Some(3));
        a.release(2);
        assert_eq!(a.alloc(), Some(2));
        assert_eq!(a.alloc(), Some(4));
    }

    #[test]
    fn from_used_leaves_gaps() {
        let a = IdAllocator::from_used(1, 10, [1, 2, 4]);
        assert_eq!(a.smallest(), Some(3));
        assert!(!a.is_free(4));
        assert!(a.is_free(5) && a.is_free(10) && !a.is_free(11));
    }

    #[test]
    fn full_u64_range_edges() {
        let mut a = IdAllocator::new(u64::MAX - 1, u64::MAX);
        assert_eq!(a.alloc(), Some(u64::MAX - 1));
        assert_eq!(a.alloc(), Some(u64::MAX));
        assert_eq!(a.alloc(), None);
        a.release(u64::MAX);
        assert_eq!(a.alloc(), Some(u64::MAX));
        let b = IdAllocator::from_used(1, u64::MAX, [u64::MAX]);
        assert_eq!(b.smallest(), Some(1));
    }

    #[test]
    fn clamp_trims_top() {
        let mut a = IdAllocator::from_used(1, u64::MAX, [1, 2, 3]);
        a.clamp(10);
        let mut got = Vec::new();
        while let Some(i) = a.alloc() {
            got.push(i);
        }
        assert_eq!(got, (4..=10).collect::<Vec<_>>());
    }

    #[test]
    fn random_ops_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (lo, hi) = (5u64, 300u64);
        let mut a = IdAllocator::new(lo, hi);
        let mut used = BTreeSet::new();
        for _ in 0..5000 {
            if rng.gen_bool(0.6) {
                let want = (lo..=hi).find(|i| !used.contains(i));
                assert_eq!(a.alloc(), want);
                if let Some(w) = want {
                    used.insert(w);
                }
            } else if let Some(&victim) = used.iter().nth(rng.gen_range(0..used.len().max(1)).min(used.len().saturating_sub(1))) {
                used.remove(&victim);
                a.release(victim);
            }
        }
    }
}
