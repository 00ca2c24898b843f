//! Location-scoped object stores for clients, edge servers and the cloud.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::crdt::{Crdt, CrdtError, Delta};
use crate::geo::{within, BoundingBox, GeoPosition, NodeId, ObjectId};
use crate::wire::{DirectoryEntry, WriteId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplicationError {
    #[error("{0} is not held locally; fetch it first")]
    NotHeld(ObjectId),
    #[error("{object} lies outside this edge server's region")]
    OutOfRegion { object: ObjectId },
    #[error(transparent)]
    Crdt(#[from] CrdtError),
}

/// A replicated object: fixed position, fixed payload kind.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoObject {
    pub id: ObjectId,
    pub pos: GeoPosition,
    pub payload: Crdt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingFetch {
    pub source: NodeId,
    pub since: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unacked {
    pub object: ObjectId,
    pub delta: Delta,
    pub issued_at: u64,
    pub sent_at: u64,
}

/// What a call to [`ClientStore::refresh_interest`] changed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterestChange {
    /// Objects that just came within the interest radius.
    pub entered: Vec<ObjectId>,
    /// Objects that just left the interest radius.
    pub left: Vec<ObjectId>,
    /// Interesting objects neither held nor being fetched.
    pub to_fetch: Vec<ObjectId>,
    /// Objects dropped from the local store.
    pub evicted: Vec<ObjectId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoteMerge {
    Changed,
    Unchanged,
    /// Not replicated here; the payload is dropped.
    NotHeld,
}

/// A client's replicated subset and the bookkeeping around it.
#[derive(Debug, Clone)]
pub struct ClientStore {
    me: NodeId,
    objects: BTreeMap<ObjectId, GeoObject>,
    interest: BTreeSet<ObjectId>,
    nearby: BTreeSet<ObjectId>,
    directory: BTreeMap<ObjectId, DirectoryEntry>,
    pending_fetch: BTreeMap<ObjectId, PendingFetch>,
    unacked: BTreeMap<WriteId, Unacked>,
    /// Join of every delta this replica issued, per object. Survives
    /// eviction so a re-fetched stale copy never hides local writes.
    own: BTreeMap<ObjectId, Crdt>,
    next_write: u64,
}

impl ClientStore {
    pub fn new(me: NodeId) -> Self {
        Self {
            me,
            objects: BTreeMap::new(),
            interest: BTreeSet::new(),
            nearby: BTreeSet::new(),
            directory: BTreeMap::new(),
            pending_fetch: BTreeMap::new(),
            unacked: BTreeMap::new(),
            own: BTreeMap::new(),
            next_write: 0,
        }
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn learn(&mut self, entries: impl IntoIterator<Item = DirectoryEntry>) {
        for e in entries {
            self.directory.insert(e.object, e);
        }
    }

    pub fn directory(&self) -> &BTreeMap<ObjectId, DirectoryEntry> {
        &self.directory
    }

    pub fn objects(&self) -> &BTreeMap<ObjectId, GeoObject> {
        &self.objects
    }

    pub fn get(&self, o: ObjectId) -> Option<&GeoObject> {
        self.objects.get(&o)
    }

    pub fn holds(&self, o: ObjectId) -> bool {
        self.objects.contains_key(&o)
    }

    pub fn interest(&self) -> &BTreeSet<ObjectId> {
        &self.interest
    }

    pub fn is_interested(&self, o: ObjectId) -> bool {
        self.interest.contains(&o)
    }

    pub fn nearby(&self) -> &BTreeSet<ObjectId> {
        &self.nearby
    }

    pub fn pending_fetches(&self) -> &BTreeMap<ObjectId, PendingFetch> {
        &self.pending_fetch
    }

    pub fn pending_fetch(&self, o: ObjectId) -> Option<PendingFetch> {
        self.pending_fetch.get(&o).copied()
    }

    pub fn unacked(&self) -> &BTreeMap<WriteId, Unacked> {
        &self.unacked
    }

    pub fn has_unacked(&self, o: ObjectId) -> bool {
        self.unacked.values().any(|u| u.object == o)
    }

    /// Recompute the interest set from the directory. Objects within
    /// `radius` of `my_pos` are nearby; the interest set is the nearby set,
    /// or every known object when `replicate_all`. Objects that fell out of
    /// interest are evicted unless a fetch or an unacknowledged write on
    /// them is outstanding.
    pub fn refresh_interest(&mut self, my_pos: GeoPosition, radius: f64, replicate_all: bool) -> InterestChange {
        let nearby: BTreeSet<ObjectId> = self
            .directory
            .values()
            .filter(|e| within(my_pos, e.pos, radius))
            .map(|e| e.object)
            .collect();
        let interest: BTreeSet<ObjectId> =
            if replicate_all { self.directory.keys().copied().collect() } else { nearby.clone() };

        let mut change = InterestChange {
            entered: nearby.difference(&self.nearby).copied().collect(),
            left: self.nearby.difference(&nearby).copied().collect(),
            ..Default::default()
        };
        change.to_fetch = interest
            .iter()
            .filter(|o| !self.objects.contains_key(o) && !self.pending_fetch.contains_key(o))
            .copied()
            .collect();
        let stale: Vec<ObjectId> = self
            .objects
            .keys()
            .filter(|o| !interest.contains(o))
            .copied()
            .collect();
        for o in stale {
            if self.evictable(o) {
                self.objects.remove(&o);
                change.evicted.push(o);
            }
        }
        self.nearby = nearby;
        self.interest = interest;
        change
    }

    fn evictable(&self, o: ObjectId) -> bool {
        !self.pending_fetch.contains_key(&o) && !self.has_unacked(o)
    }

    pub fn mark_fetching(&mut self, o: ObjectId, source: NodeId, now: u64) {
        self.pending_fetch.insert(o, PendingFetch { source, since: now });
    }

    pub fn clear_fetch(&mut self, o: ObjectId) -> Option<PendingFetch> {
        self.pending_fetch.remove(&o)
    }

    /// Adopt a full copy received from a peer or server, merged with
    /// whatever is held already and with this replica's own writes.
    pub fn install(&mut self, mut obj: GeoObject) -> Result<(), ReplicationError> {
        self.pending_fetch.remove(&obj.id);
        if let Some(own) = self.own.get(&obj.id) {
            obj.payload.merge(own)?;
        }
        match self.objects.get_mut(&obj.id) {
            Some(held) => {
                held.payload.merge(&obj.payload)?;
            }
            None => {
                self.objects.insert(obj.id, obj);
            }
        }
        Ok(())
    }

    /// Apply a local mutation. `f` mutates the payload in place and returns
    /// the delta it produced.
    pub fn mutate(
        &mut self,
        o: ObjectId,
        now: u64,
        f: impl FnOnce(&mut Crdt, NodeId) -> Delta,
    ) -> Result<(WriteId, Delta), ReplicationError> {
        let me = self.me;
        let obj = self.objects.get_mut(&o).ok_or(ReplicationError::NotHeld(o))?;
        let delta = f(&mut obj.payload, me);
        let write = WriteId { origin: me, seq: self.next_write };
        self.next_write += 1;
        match self.own.get_mut(&o) {
            Some(acc) => {
                acc.merge(&delta)?;
            }
            None => {
                self.own.insert(o, delta.clone());
            }
        }
        self.unacked.insert(write, Unacked { object: o, delta: delta.clone(), issued_at: now, sent_at: now });
        Ok((write, delta))
    }

    pub fn merge_remote(&mut self, o: ObjectId, delta: &Delta) -> Result<RemoteMerge, ReplicationError> {
        match self.objects.get_mut(&o) {
            None => Ok(RemoteMerge::NotHeld),
            Some(obj) => Ok(if obj.payload.merge(delta)? { RemoteMerge::Changed } else { RemoteMerge::Unchanged }),
        }
    }

    pub fn on_ack(&mut self, write: WriteId) -> Option<Unacked> {
        self.unacked.remove(&write)
    }

    /// Writes not acknowledged within `timeout`; their resend clock restarts.
    pub fn overdue(&mut self, now: u64, timeout: u64) -> Vec<(WriteId, Unacked)> {
        let mut out = Vec::new();
        for (w, u) in self.unacked.iter_mut() {
            if u.sent_at + timeout <= now {
                u.sent_at = now;
                out.push((*w, u.clone()));
            }
        }
        out
    }

    /// Join of everything this replica wrote to `o`.
    pub fn own_contribution(&self, o: ObjectId) -> Option<&Crdt> {
        self.own.get(&o)
    }
}

/// Reconcile two client copies of `o` so both end with the join.
/// A side that is not interested drops what it was sent.
pub fn peer_sync(a: &mut ClientStore, b: &mut ClientStore, o: ObjectId) -> Result<(), ReplicationError> {
    let from_a = a.get(o).cloned();
    let from_b = b.get(o).cloned();
    for (dst, src) in [(&mut *b, &from_a), (&mut *a, &from_b)] {
        if let Some(obj) = src {
            if dst.holds(o) {
                dst.merge_remote(o, &obj.payload)?;
            } else if dst.is_interested(o) {
                dst.install(obj.clone())?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerTier {
    Edge { region: BoundingBox, upstream: NodeId },
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerDelta {
    Merged { changed: bool },
    /// Object unknown here; the delta is parked until a full copy arrives
    /// from upstream.
    Parked,
}

/// Object store of an edge server (one region) or the cloud (everything).
#[derive(Debug, Clone)]
pub struct ServerStore {
    id: NodeId,
    tier: ServerTier,
    objects: BTreeMap<ObjectId, GeoObject>,
    subscribers: BTreeMap<ObjectId, BTreeSet<NodeId>>,
    parked: BTreeMap<ObjectId, Vec<Delta>>,
}

impl ServerStore {
    pub fn edge(id: NodeId, region: BoundingBox, upstream: NodeId) -> Self {
        Self::with_tier(id, ServerTier::Edge { region, upstream })
    }

    pub fn cloud(id: NodeId) -> Self {
        Self::with_tier(id, ServerTier::Cloud)
    }

    fn with_tier(id: NodeId, tier: ServerTier) -> Self {
        Self { id, tier, objects: BTreeMap::new(), subscribers: BTreeMap::new(), parked: BTreeMap::new() }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tier(&self) -> ServerTier {
        self.tier
    }

    pub fn upstream(&self) -> Option<NodeId> {
        match self.tier {
            ServerTier::Edge { upstream, .. } => Some(upstream),
            ServerTier::Cloud => None,
        }
    }

    pub fn covers(&self, pos: GeoPosition) -> bool {
        match self.tier {
            ServerTier::Edge { region, .. } => region.contains(pos),
            ServerTier::Cloud => true,
        }
    }

    /// Place an object in this store.
    pub fn seed(&mut self, obj: GeoObject) -> Result<(), ReplicationError> {
        if !self.covers(obj.pos) {
            return Err(ReplicationError::OutOfRegion { object: obj.id });
        }
        self.objects.insert(obj.id, obj);
        Ok(())
    }

    pub fn objects(&self) -> &BTreeMap<ObjectId, GeoObject> {
        &self.objects
    }

    pub fn get(&self, o: ObjectId) -> Option<&GeoObject> {
        self.objects.get(&o)
    }

    pub fn on_delta(&mut self, o: ObjectId, delta: &Delta) -> Result<ServerDelta, ReplicationError> {
        match self.objects.get_mut(&o) {
            Some(obj) => Ok(ServerDelta::Merged { changed: obj.payload.merge(delta)? }),
            None => {
                self.parked.entry(o).or_default().push(delta.clone());
                Ok(ServerDelta::Parked)
            }
        }
    }

    /// Full copy arriving from upstream for a previously unknown object.
    /// Parked deltas are merged into it.
    pub fn install_from_upstream(&mut self, mut obj: GeoObject) -> Result<(), ReplicationError> {
        if let Some(ds) = self.parked.remove(&obj.id) {
            for d in &ds {
                obj.payload.merge(d)?;
            }
        }
        if !self.covers(obj.pos) {
            return Err(ReplicationError::OutOfRegion { object: obj.id });
        }
        match self.objects.get_mut(&obj.id) {
            Some(held) => {
                held.payload.merge(&obj.payload)?;
            }
            None => {
                self.objects.insert(obj.id, obj);
            }
        }
        Ok(())
    }

    pub fn is_parked(&self, o: ObjectId) -> bool {
        self.parked.contains_key(&o)
    }

    pub fn subscribe(&mut self, o: ObjectId, node: NodeId) -> bool {
        self.subscribers.entry(o).or_default().insert(node)
    }

    pub fn unsubscribe(&mut self, o: ObjectId, node: NodeId) -> bool {
        let Some(s) = self.subscribers.get_mut(&o) else { return false };
        let removed = s.remove(&node);
        if s.is_empty() {
            self.subscribers.remove(&o);
        }
        removed
    }

    pub fn subscribers(&self, o: ObjectId) -> impl Iterator<Item = NodeId> + '_ {
        self.subscribers.get(&o).into_iter().flatten().copied()
    }
}
