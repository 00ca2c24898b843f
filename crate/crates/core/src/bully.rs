//! Per-object bully election.
//!
//! For every object a node replicates it tracks which node it believes is
//! the object's bully: the lowest id among the interested nodes it can
//! reach. The bully holds the object-server link; everyone else routes
//! updates to it through `via`, the peer its claims arrived from.
//!
//! Claims carry the claimant's broadcast epoch. A node that accepts a
//! fresh claim passes it on to its other interested peers, so the minimum
//! id spreads across the whole interest group and not just one hop. A
//! crashed bully stops producing epochs and every follower times out.

use std::collections::BTreeMap;

use crate::geo::{NodeId, ObjectId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BullyClaim {
    pub sender: NodeId,
    pub object: ObjectId,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BullyEntry {
    pub bully: NodeId,
    /// Peer the current bully's claims arrive through; `None` when self.
    pub via: Option<NodeId>,
    pub epoch: u64,
    /// Timeout deadline; armed exactly when the bully is remote.
    pub deadline: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimOutcome {
    /// A lower (or equal) id was accepted. `changed` when the bully changed;
    /// `forward` when the claim is fresh and should be passed on.
    Accepted { changed: bool, forward: bool },
    /// This node is the bully and the claimant is higher: answer it.
    CounterClaim(BullyClaim),
    Ignored,
    NotInterested,
}

#[derive(Debug, Clone)]
pub struct BullyTable {
    me: NodeId,
    timeout: u64,
    epoch: u64,
    entries: BTreeMap<ObjectId, BullyEntry>,
}

impl BullyTable {
    /// Every object starts with this node as its own bully.
    pub fn init(me: NodeId, objects: impl IntoIterator<Item = ObjectId>, timeout: u64) -> Self {
        let mut t = Self { me, timeout, epoch: 0, entries: BTreeMap::new() };
        for o in objects {
            t.add_object(o);
        }
        t
    }

    fn own(&self) -> BullyEntry {
        BullyEntry { bully: self.me, via: None, epoch: self.epoch, deadline: None }
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn add_object(&mut self, o: ObjectId) -> bool {
        if self.entries.contains_key(&o) {
            return false;
        }
        let own = self.own();
        self.entries.insert(o, own);
        true
    }

    pub fn remove_object(&mut self, o: ObjectId) -> Option<BullyEntry> {
        self.entries.remove(&o)
    }

    pub fn entry(&self, o: ObjectId) -> Option<&BullyEntry> {
        self.entries.get(&o)
    }

    pub fn bully_of(&self, o: ObjectId) -> Option<NodeId> {
        self.entries.get(&o).map(|e| e.bully)
    }

    pub fn is_bully(&self, o: ObjectId) -> bool {
        self.bully_of(o) == Some(self.me)
    }

    /// Next hop towards the bully of `o`, `None` when self is bully or the
    /// object is unknown.
    pub fn next_hop(&self, o: ObjectId) -> Option<NodeId> {
        self.entries.get(&o).and_then(|e| e.via)
    }

    pub fn objects(&self) -> impl Iterator<Item = (&ObjectId, &BullyEntry)> {
        self.entries.iter()
    }

    /// One claim per object this node is bully of. Advances the epoch.
    pub fn broadcast(&mut self) -> Vec<BullyClaim> {
        self.epoch += 1;
        let me = self.me;
        let epoch = self.epoch;
        self.entries
            .iter_mut()
            .filter(|(_, e)| e.bully == me)
            .map(|(o, e)| {
                e.epoch = epoch;
                BullyClaim { sender: me, object: *o, epoch }
            })
            .collect()
    }

    /// Handle a claim delivered by peer `from`.
    pub fn on_claim(&mut self, claim: &BullyClaim, from: NodeId, now: u64) -> ClaimOutcome {
        if claim.sender == self.me {
            return ClaimOutcome::Ignored;
        }
        let me = self.me;
        let epoch = self.epoch;
        let deadline = now + self.timeout;
        let Some(e) = self.entries.get_mut(&claim.object) else {
            return ClaimOutcome::NotInterested;
        };
        if claim.sender <= e.bully {
            let changed = claim.sender != e.bully;
            let fresh = changed || claim.epoch > e.epoch;
            if changed {
                e.bully = claim.sender;
                e.via = Some(from);
                e.epoch = claim.epoch;
            } else if fresh {
                e.epoch = claim.epoch;
                e.via = Some(from);
            }
            e.deadline = Some(deadline);
            ClaimOutcome::Accepted { changed, forward: fresh }
        } else if e.bully == me && claim.sender > me {
            ClaimOutcome::CounterClaim(BullyClaim { sender: me, object: claim.object, epoch })
        } else {
            ClaimOutcome::Ignored
        }
    }

    /// Self-promote for `o`.
    pub fn on_timeout(&mut self, o: ObjectId) {
        let own = self.own();
        if let Some(e) = self.entries.get_mut(&o) {
            *e = own;
        }
    }

    /// Self-promote every object whose deadline is at or before `now`.
    pub fn expire(&mut self, now: u64) -> Vec<ObjectId> {
        let due: Vec<ObjectId> = self
            .entries
            .iter()
            .filter(|(_, e)| e.deadline.is_some_and(|d| d <= now))
            .map(|(o, _)| *o)
            .collect();
        for o in &due {
            self.on_timeout(*o);
        }
        due
    }

    /// Earliest armed deadline.
    pub fn next_deadline(&self) -> Option<u64> {
        self.entries.values().filter_map(|e| e.deadline).min()
    }

    /// The link to `peer` closed: every object whose bully was `peer`, or
    /// was reached through it, reverts to self at once.
    pub fn on_peer_disconnect(&mut self, peer: NodeId) -> Vec<ObjectId> {
        let hit: Vec<ObjectId> = self
            .entries
            .iter()
            .filter(|(_, e)| e.bully == peer || e.via == Some(peer))
            .map(|(o, _)| *o)
            .collect();
        for o in &hit {
            self.on_timeout(*o);
        }
        hit
    }

    /// Whether this node must keep an object-server link: it is bully of at
    /// least one object it replicates.
    pub fn server_link_required(&self) -> bool {
        self.entries.values().any(|e| e.bully == self.me)
    }
}
