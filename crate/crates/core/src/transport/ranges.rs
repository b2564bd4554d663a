use std::collections::BTreeMap;

/// Set of u64 values stored as disjoint half-open ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeSet {
    ranges: BTreeMap<u64, u64>,
}

impl RangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn contains(&self, v: u64) -> bool {
        self.ranges
            .range(..=v)
            .next_back()
            .is_some_and(|(_, &end)| v < end)
    }

    pub fn max(&self) -> Option<u64> {
        self.ranges.iter().next_back().map(|(_, &e)| e - 1)
    }

    /// Returns false if `v` was already present.
    pub fn insert(&mut self, v: u64) -> bool {
        if self.contains(v) {
            return false;
        }
        self.insert_range(v, v + 1);
        true
    }

    /// Inserts `[start, end)`, merging with neighbours.
    pub fn insert_range(&mut self, mut start: u64, mut end: u64) {
        if start >= end {
            return;
        }
        if let Some((&s, &e)) = self.ranges.range(..=start).next_back() {
            if e >= start {
                start = s;
                end = end.max(e);
                self.ranges.remove(&s);
            }
        }
        while let Some((&s, &e)) = self.ranges.range(start..).next() {
            if s > end {
                break;
            }
            end = end.max(e);
            self.ranges.remove(&s);
        }
        self.ranges.insert(start, end);
    }

    /// True if `[start, end)` is entirely present.
    pub fn covers(&self, start: u64, end: u64) -> bool {
        if start >= end {
            return true;
        }
        self.ranges
            .range(..=start)
            .next_back()
            .is_some_and(|(_, &e)| e >= end)
    }

    /// Inclusive `(lo, hi)` ranges, highest first.
    pub fn iter_desc(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.ranges.iter().rev().map(|(&s, &e)| (s, e - 1))
    }

    /// Drops everything below `v`.
    pub fn trim_below(&mut self, v: u64) {
        let keys: Vec<u64> = self.ranges.range(..v).map(|(&s, _)| s).collect();
        for s in keys {
            let e = self.ranges.remove(&s).unwrap();
            if e > v {
                self.ranges.insert(v, e);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges() {
        let mut r = RangeSet::new();
        assert!(r.insert(5));
        assert!(r.insert(7));
        assert!(!r.insert(5));
        assert_eq!(r.len(), 2);
        assert!(r.insert(6));
        assert_eq!(r.len(), 1);
        assert_eq!(r.iter_desc().collect::<Vec<_>>(), vec![(5, 7)]);
        r.insert_range(0, 3);
        r.insert_range(2, 5);
        assert_eq!(r.iter_desc().collect::<Vec<_>>(), vec![(0, 7)]);
        assert!(r.covers(1, 8));
        assert!(!r.covers(1, 9));
        r.trim_below(3);
        assert_eq!(r.iter_desc().collect::<Vec<_>>(), vec![(3, 7)]);
        assert_eq!(r.max(), Some(7));
    }
}
