use std::collections::{BTreeMap, BTreeSet};

use super::{LwwRegister, ReplicaId};

/// Unique tag of one write: the `seq`-th event issued by `replica`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Dot {
    pub replica: ReplicaId,
    pub seq: u64,
}

/// Set of observed dots, stored as a per-replica contiguous prefix plus the
/// dots above it. Kept compacted so equal sets have equal representations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CausalContext {
    pub(crate) vv: BTreeMap<ReplicaId, u64>,
    pub(crate) cloud: BTreeSet<Dot>,
}

impl CausalContext {
    pub fn contains(&self, d: &Dot) -> bool {
        self.vv.get(&d.replica).is_some_and(|&m| d.seq <= m) || self.cloud.contains(d)
    }

    pub fn max_seq(&self, r: ReplicaId) -> u64 {
        let prefix = self.vv.get(&r).copied().unwrap_or(0);
        let above = self
            .cloud
            .range(Dot { replica: r, seq: 0 }..=Dot { replica: r, seq: u64::MAX })
            .next_back()
            .map_or(0, |d| d.seq);
        prefix.max(above)
    }

    pub fn insert(&mut self, d: Dot) {
        if !self.contains(&d) {
            self.cloud.insert(d);
            self.compact();
        }
    }

    pub fn union(&mut self, other: &CausalContext) {
        for (r, &m) in &other.vv {
            let slot = self.vv.entry(*r).or_insert(0);
            *slot = (*slot).max(m);
        }
        self.cloud.extend(other.cloud.iter().copied());
        self.compact();
    }

    fn compact(&mut self) {
        let mut keep = BTreeSet::new();
        for d in std::mem::take(&mut self.cloud) {
            let prefix = self.vv.entry(d.replica).or_insert(0);
            if d.seq <= *prefix {
                continue;
            }
            if d.seq == *prefix + 1 {
                *prefix = d.seq;
            } else {
                keep.insert(d);
            }
        }
        // Absorbing a dot can make later cloud dots contiguous; the set is
        // ordered by (replica, seq) so one more sweep per replica suffices.
        let mut again = BTreeSet::new();
        for d in keep {
            let prefix = self.vv.entry(d.replica).or_insert(0);
            if d.seq <= *prefix {
                continue;
            }
            if d.seq == *prefix + 1 {
                *prefix = d.seq;
            } else {
                again.insert(d);
            }
        }
        self.cloud = again;
        self.vv.retain(|_, m| *m > 0);
    }

    pub fn is_empty(&self) -> bool {
        self.vv.is_empty() && self.cloud.is_empty()
    }

    pub fn len(&self) -> usize {
        self.vv.values().map(|&m| m as usize).sum::<usize>() + self.cloud.len()
    }
}

/// Observed-remove map from string keys to last-writer-wins byte values.
///
/// Each key holds the set of live dots that wrote it; a put or remove
/// supersedes exactly the dots it observed, so concurrent puts both survive
/// and `get` resolves them by LWW order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OrMap {
    pub(crate) entries: BTreeMap<String, BTreeMap<Dot, LwwRegister>>,
    pub(crate) context: CausalContext,
}

impl OrMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.entries
            .get(key)?
            .values()
            .reduce(|a, b| if b.supersedes(a) { b } else { a })
            .map(|r| r.value.as_slice())
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn context(&self) -> &CausalContext {
        &self.context
    }

    /// Write `value` under `key` at replica `r` with LWW timestamp `t`.
    /// Returns the delta: the new entry plus the dots it supersedes.
    pub fn put(&mut self, key: &str, value: impl Into<Vec<u8>>, r: ReplicaId, t: u64) -> OrMap {
        let dot = Dot { replica: r, seq: self.context.max_seq(r) + 1 };
        let reg = LwwRegister::new(value, t, r);

        let mut delta_ctx = CausalContext::default();
        if let Some(old) = self.entries.get(key) {
            for d in old.keys() {
                delta_ctx.insert(*d);
            }
        }
        delta_ctx.insert(dot);

        self.entries.insert(key.to_owned(), BTreeMap::from([(dot, reg.clone())]));
        self.context.insert(dot);

        OrMap {
            entries: BTreeMap::from([(key.to_owned(), BTreeMap::from([(dot, reg)]))]),
            context: delta_ctx,
        }
    }

    /// Remove `key` as observed locally. The delta carries no entries, only
    /// the removed dots.
    pub fn remove(&mut self, key: &str) -> OrMap {
        let mut delta_ctx = CausalContext::default();
        if let Some(old) = self.entries.remove(key) {
            for d in old.keys() {
                delta_ctx.insert(*d);
            }
        }
        OrMap { entries: BTreeMap::new(), context: delta_ctx }
    }

    /// Join with another state or delta. Returns whether `self` changed.
    pub fn merge(&mut self, other: &OrMap) -> bool {
        let before_len = self.context.len();
        let mut changed = false;
        let keys: BTreeSet<String> =
            self.entries.keys().chain(other.entries.keys()).cloned().collect();
        for key in keys {
            let empty = BTreeMap::new();
            let mine = self.entries.get(&key).unwrap_or(&empty);
            let theirs = other.entries.get(&key).unwrap_or(&empty);
            let mut merged: BTreeMap<Dot, LwwRegister> = BTreeMap::new();
            for (d, reg) in mine {
                match theirs.get(d) {
                    Some(t) => {
                        let mut r = reg.clone();
                        r.merge(t);
                        merged.insert(*d, r);
                    }
                    None if !other.context.contains(d) => {
                        merged.insert(*d, reg.clone());
                    }
                    None => {}
                }
            }
            for (d, reg) in theirs {
                if !mine.contains_key(d) && !self.context.contains(d) {
                    merged.insert(*d, reg.clone());
                }
            }
            if &merged != mine {
                changed = true;
            }
            if merged.is_empty() {
                self.entries.remove(&key);
            } else {
                self.entries.insert(key, merged);
            }
        }
        self.context.union(&other.context);
        changed || self.context.len() != before_len
    }

    /// Whether merging `other` into `self` would leave `self` unchanged.
    pub fn includes(&self, other: &OrMap) -> bool {
        let mut probe = self.clone();
        !probe.merge(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::NodeId;

    const R1: NodeId = NodeId(1);
    const R2: NodeId = NodeId(2);

    #[test]
    fn put_then_get() {
        let mut m = OrMap::new();
        m.put("k", "v", R1, 1);
        assert_eq!(m.get("k"), Some(&b"v"[..]));
        assert_eq!(m.get("other"), None);
    }

    #[test]
    fn concurrent_puts_resolve_by_lww() {
        let mut a = OrMap::new();
        let mut b = OrMap::new();
        a.put("k", "v1", R1, 5);
        b.put("k", "v2", R2, 9);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.get("k"), Some(&b"v2"[..]));
        // both dots survive until a later observed write
        assert_eq!(ab.entries["k"].len(), 2);
    }

    #[test]
    fn disjoint_keys_union() {
        let mut a = OrMap::new();
        let mut b = OrMap::new();
        a.put("x", "1", R1, 1);
        b.put("y", "2", R2, 1);
        a.merge(&b);
        assert_eq!(a.keys().collect::<Vec<_>>(), vec!["x", "y"]);
    }

    #[test]
    fn removed_key_returns_only_after_new_add() {
        let mut a = OrMap::new();
        a.put("k", "v", R1, 1);
        let mut b = a.clone();
        let rm = b.remove("k");
        a.merge(&rm);
        assert!(!a.contains_key("k"));
        // re-merging the old state does not resurrect it
        let mut old = OrMap::new();
        old.put("k", "v", R1, 1);
        a.merge(&old);
        assert!(!a.contains_key("k"));
        let add = b.put("k", "again", R2, 2);
        a.merge(&add);
        assert_eq!(a.get("k"), Some(&b"again"[..]));
    }

    #[test]
    fn concurrent_add_survives_remove() {
        let mut a = OrMap::new();
        a.put("k", "v", R1, 1);
        let mut b = a.clone();
        let rm = a.remove("k");
        let add = b.put("k", "w", R2, 2);
        a.merge(&add);
        b.merge(&rm);
        assert_eq!(a, b);
        assert_eq!(a.get("k"), Some(&b"w"[..]));
    }

    #[test]
    fn delta_reproduces_post_state() {
        let mut a = OrMap::new();
        a.put("k", "v", R1, 1);
        let mut pre = a.clone();
        let d = a.put("k", "w", R1, 2);
        pre.merge(&d);
        assert_eq!(pre, a);
    }

    #[test]
    fn context_compacts() {
        let mut c = CausalContext::default();
        c.insert(Dot { replica: R1, seq: 3 });
        c.insert(Dot { replica: R1, seq: 1 });
        assert_eq!(c.cloud.len(), 1);
        c.insert(Dot { replica: R1, seq: 2 });
        assert!(c.cloud.is_empty());
        assert_eq!(c.vv[&R1], 3);
        assert_eq!(c.max_seq(R1), 3);
        assert_eq!(c.max_seq(R2), 0);
    }
}
