use std::collections::BTreeMap;

use super::ReplicaId;

/// Positive/negative counter. Each replica owns one slot in each map and
/// only ever grows it; merge takes the slot-wise maximum.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PnCounter {
    pub(crate) pos: BTreeMap<ReplicaId, u64>,
    pub(crate) neg: BTreeMap<ReplicaId, u64>,
}

impl PnCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self) -> i64 {
        let p: u64 = self.pos.values().sum();
        let n: u64 = self.neg.values().sum();
        p as i64 - n as i64
    }

    /// Add `n` at replica `r`. The returned delta carries only `r`'s
    /// updated positive slot.
    pub fn increment(&mut self, r: ReplicaId, n: u64) -> PnCounter {
        assert!(n >= 1, "increment by zero");
        let slot = self.pos.entry(r).or_insert(0);
        *slot += n;
        PnCounter { pos: BTreeMap::from([(r, *slot)]), neg: BTreeMap::new() }
    }

    pub fn decrement(&mut self, r: ReplicaId, n: u64) -> PnCounter {
        assert!(n >= 1, "decrement by zero");
        let slot = self.neg.entry(r).or_insert(0);
        *slot += n;
        PnCounter { pos: BTreeMap::new(), neg: BTreeMap::from([(r, *slot)]) }
    }

    /// Join with another state or delta. Returns whether `self` changed.
    pub fn merge(&mut self, other: &PnCounter) -> bool {
        let mut changed = false;
        for (side, theirs) in [(&mut self.pos, &other.pos), (&mut self.neg, &other.neg)] {
            for (r, &v) in theirs {
                let slot = side.entry(*r).or_insert(0);
                if v > *slot {
                    *slot = v;
                    changed = true;
                }
            }
        }
        changed
    }

    pub fn replicas(&self) -> usize {
        self.pos.len() + self.neg.len()
    }

    /// Slot-wise `other ≤ self`.
    pub fn includes(&self, other: &PnCounter) -> bool {
        let covered = |mine: &BTreeMap<ReplicaId, u64>, theirs: &BTreeMap<ReplicaId, u64>| {
            theirs.iter().all(|(r, v)| mine.get(r).copied().unwrap_or(0) >= *v)
        };
        covered(&self.pos, &other.pos) && covered(&self.neg, &other.neg)
    }
}
