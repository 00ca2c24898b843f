//! Proximity overlay: the signalling server's position registry and the
//! client-side peer view (position announcement, gossip and peer review).
//!
//! Both halves are pure state machines. Each operation takes the current
//! state plus an input and returns the messages it wants sent; the
//! simulator delivers them.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::ProtocolConfig;
use crate::geo::{distance, within, GeoPosition, NodeId};
use crate::wire::{Message, Outbound, PeerInfo};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionRecord {
    pub node: NodeId,
    pub pos: GeoPosition,
    pub at: u64,
}

/// Registry of every node's current position plus the full report log.
#[derive(Debug, Clone)]
pub struct SignallingState {
    max_distance: f64,
    nodes_pos: BTreeMap<NodeId, GeoPosition>,
    history: Vec<PositionRecord>,
}

impl SignallingState {
    pub fn new(max_distance: f64) -> Self {
        Self { max_distance, nodes_pos: BTreeMap::new(), history: Vec::new() }
    }

    /// Record `node` at `pos` and return every other registered node whose
    /// current position is within `max_distance` of it, in id order.
    pub fn on_node_pos(&mut self, node: NodeId, pos: GeoPosition, now: u64) -> Vec<PeerInfo> {
        self.nodes_pos.insert(node, pos);
        self.history.push(PositionRecord { node, pos, at: now });
        self.nodes_pos
            .iter()
            .filter(|(id, p)| **id != node && within(pos, **p, self.max_distance))
            .map(|(id, p)| PeerInfo { id: *id, pos: *p })
            .collect()
    }

    /// Drop a node that moved to another signalling server's area.
    pub fn forget(&mut self, node: NodeId) -> bool {
        self.nodes_pos.remove(&node).is_some()
    }

    pub fn position(&self, node: NodeId) -> Option<GeoPosition> {
        self.nodes_pos.get(&node).copied()
    }

    pub fn registered(&self) -> usize {
        self.nodes_pos.len()
    }

    pub fn history(&self) -> &[PositionRecord] {
        &self.history
    }
}

/// Position announcement. With `propagate` set it floods the overlay:
/// every forwarder appends itself to `visited_peers`, and `notified`
/// accumulates the nodes already sent a copy so no node is sent it twice
/// along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMessage {
    pub sender: NodeId,
    pub current_pos: GeoPosition,
    pub propagate: bool,
    pub visited_peers: BTreeSet<NodeId>,
    pub notified: BTreeSet<NodeId>,
    /// Per-sender flood sequence number.
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub pos: GeoPosition,
    pub heard_at: u64,
}

/// Result of answering a dial.
#[derive(Debug, Clone, PartialEq)]
pub enum DialAnswer {
    Accepted(Outbound),
    Rejected(Outbound),
}

/// Result of a dial acknowledgement arriving at the dialer.
#[derive(Debug, Clone, PartialEq)]
pub enum DialOutcome {
    Connected,
    AlreadyPeer,
    Rejected,
    /// Accepted remotely but this node filled up meanwhile; hang up.
    Overfull(Outbound),
    Unexpected,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Review {
    pub out: Vec<Outbound>,
    pub dropped: Vec<NodeId>,
    pub dialed: Vec<NodeId>,
}

/// A client's overlay state.
#[derive(Debug, Clone)]
pub struct PeerView {
    me: NodeId,
    max_distance: f64,
    max_peers: usize,
    candidate_ttl: u64,
    cooldown_period: u64,
    peers: BTreeMap<NodeId, GeoPosition>,
    nodes_of_interest: BTreeMap<NodeId, Candidate>,
    pending_dials: BTreeMap<NodeId, GeoPosition>,
    cooldown: BTreeMap<NodeId, u64>,
    last_sent_pos: GeoPosition,
    server: Option<NodeId>,
    flood_seq: u64,
    forwarded: BTreeMap<NodeId, u64>,
}

impl PeerView {
    pub fn new(me: NodeId, cfg: &ProtocolConfig, pos: GeoPosition, server: Option<NodeId>) -> Self {
        Self {
            me,
            max_distance: cfg.max_distance,
            max_peers: cfg.max_peers,
            candidate_ttl: cfg.candidate_ttl(),
            cooldown_period: cfg.announcement_time,
            peers: BTreeMap::new(),
            nodes_of_interest: BTreeMap::new(),
            pending_dials: BTreeMap::new(),
            cooldown: BTreeMap::new(),
            last_sent_pos: pos,
            server,
            flood_seq: 0,
            forwarded: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.me
    }

    pub fn peers(&self) -> &BTreeMap<NodeId, GeoPosition> {
        &self.peers
    }

    pub fn is_peer(&self, n: NodeId) -> bool {
        self.peers.contains_key(&n)
    }

    pub fn nodes_of_interest(&self) -> &BTreeMap<NodeId, Candidate> {
        &self.nodes_of_interest
    }

    pub fn last_sent_pos(&self) -> GeoPosition {
        self.last_sent_pos
    }

    pub fn server(&self) -> Option<NodeId> {
        self.server
    }

    /// Report `pos` to the signalling server, if one is reachable.
    pub fn join(&mut self, pos: GeoPosition) -> Vec<Outbound> {
        self.last_sent_pos = pos;
        match self.server {
            Some(s) => vec![Outbound::new(s, Message::JoinOrPos { node: self.me, pos })],
            None => Vec::new(),
        }
    }

    pub fn on_server_response(&mut self, peers: &[PeerInfo], now: u64) {
        for p in peers.iter().filter(|p| p.id != self.me) {
            self.nodes_of_interest.insert(p.id, Candidate { pos: p.pos, heard_at: now });
            if let Some(known) = self.peers.get_mut(&p.id) {
                *known = p.pos;
            }
        }
    }

    /// The server handed this node over to another signalling endpoint.
    pub fn on_redirect(&mut self, server: NodeId, pos: GeoPosition) -> Vec<Outbound> {
        self.server = Some(server);
        self.join(pos)
    }

    pub fn server_lost(&mut self) {
        self.server = None;
    }

    /// Periodic movement check. Announces only when the node has moved more
    /// than `max_distance` since its last announcement.
    pub fn update_position(&mut self, current: GeoPosition, _now: u64) -> Vec<Outbound> {
        if distance(self.last_sent_pos, current) <= self.max_distance {
            return Vec::new();
        }
        self.last_sent_pos = current;
        let mut out = Vec::with_capacity(self.peers.len() + 1);
        match self.server {
            Some(s) => {
                out.push(Outbound::new(s, Message::JoinOrPos { node: self.me, pos: current }));
                let msg = PositionMessage {
                    sender: self.me,
                    current_pos: current,
                    propagate: false,
                    visited_peers: BTreeSet::new(),
                    notified: BTreeSet::new(),
                    seq: 0,
                };
                for &p in self.peers.keys() {
                    out.push(Outbound::new(p, Message::Position(msg.clone())));
                }
            }
            None => {
                self.flood_seq += 1;
                let msg = PositionMessage {
                    sender: self.me,
                    current_pos: current,
                    propagate: true,
                    visited_peers: BTreeSet::from([self.me]),
                    notified: self.peers.keys().copied().collect(),
                    seq: self.flood_seq,
                };
                for &p in self.peers.keys() {
                    out.push(Outbound::new(p, Message::Position(msg.clone())));
                }
            }
        }
        out
    }

    pub fn on_position_message(
        &mut self,
        m: &PositionMessage,
        my_pos: GeoPosition,
        now: u64,
    ) -> Vec<Outbound> {
        if m.sender == self.me {
            return Vec::new();
        }
        if within(my_pos, m.current_pos, self.max_distance) {
            self.nodes_of_interest.insert(m.sender, Candidate { pos: m.current_pos, heard_at: now });
        } else {
            self.nodes_of_interest.remove(&m.sender);
        }
        if let Some(known) = self.peers.get_mut(&m.sender) {
            *known = m.current_pos;
        }
        if !m.propagate || m.visited_peers.contains(&self.me) {
            return Vec::new();
        }
        let last = self.forwarded.entry(m.sender).or_insert(0);
        if m.seq <= *last {
            return Vec::new();
        }
        *last = m.seq;

        let mut fwd = m.clone();
        fwd.visited_peers.insert(self.me);
        let targets: Vec<NodeId> = self
            .peers
            .keys()
            .filter(|p| !fwd.visited_peers.contains(p) && !fwd.notified.contains(p))
            .copied()
            .collect();
        fwd.notified.extend(targets.iter().copied());
        targets.into_iter().map(|t| Outbound::new(t, Message::Position(fwd.clone()))).collect()
    }

    /// Drop distant peers, dial the nearest candidates up to `max_peers`,
    /// then trim the most distant peers while over the bound.
    pub fn review_peers(&mut self, my_pos: GeoPosition, now: u64) -> Review {
        let mut review = Review::default();

        let ttl = self.candidate_ttl;
        self.nodes_of_interest.retain(|_, c| c.heard_at + ttl >= now);
        self.cooldown.retain(|_, until| *until > now);

        let distant: Vec<NodeId> = self
            .peers
            .iter()
            .filter(|(_, p)| distance(my_pos, **p) > self.max_distance)
            .map(|(id, _)| *id)
            .collect();
        for id in distant {
            self.peers.remove(&id);
            review.out.push(Outbound::new(id, Message::Hangup));
            review.dropped.push(id);
        }

        let mut candidates: Vec<(f64, NodeId, GeoPosition)> = self
            .nodes_of_interest
            .iter()
            .filter(|(id, _)| {
                **id != self.me
                    && !self.peers.contains_key(id)
                    && !self.pending_dials.contains_key(id)
                    && !self.cooldown.contains_key(id)
            })
            .map(|(id, c)| (distance(my_pos, c.pos), *id, c.pos))
            .filter(|(d, _, _)| *d <= self.max_distance)
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, id, pos) in candidates {
            if self.peers.len() + self.pending_dials.len() >= self.max_peers {
                break;
            }
            self.pending_dials.insert(id, pos);
            review.out.push(Outbound::new(id, Message::Dial { node: self.me, pos: my_pos }));
            review.dialed.push(id);
        }

        while self.peers.len() > self.max_peers {
            let far = self
                .peers
                .iter()
                .map(|(id, p)| (distance(my_pos, *p), *id))
                .max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, id)| id)
                .expect("non-empty");
            self.peers.remove(&far);
            review.out.push(Outbound::new(far, Message::Hangup));
            review.dropped.push(far);
        }
        review
    }

    /// A remote node asks to peer. Accepted iff this node has room.
    pub fn on_dial(&mut self, from: NodeId, pos: GeoPosition, now: u64) -> DialAnswer {
        if let Some(known) = self.peers.get_mut(&from) {
            *known = pos;
            return DialAnswer::Accepted(Outbound::new(from, Message::DialAck { accept: true }));
        }
        if self.peers.len() < self.max_peers {
            self.peers.insert(from, pos);
            self.nodes_of_interest.insert(from, Candidate { pos, heard_at: now });
            DialAnswer::Accepted(Outbound::new(from, Message::DialAck { accept: true }))
        } else {
            DialAnswer::Rejected(Outbound::new(from, Message::DialAck { accept: false }))
        }
    }

    pub fn on_dial_ack(&mut self, from: NodeId, accept: bool, now: u64) -> DialOutcome {
        let Some(pos) = self.pending_dials.remove(&from) else {
            return DialOutcome::Unexpected;
        };
        if !accept {
            self.cooldown.insert(from, now + self.cooldown_period);
            return DialOutcome::Rejected;
        }
        if self.peers.contains_key(&from) {
            return DialOutcome::AlreadyPeer;
        }
        if self.peers.len() >= self.max_peers {
            return DialOutcome::Overfull(Outbound::new(from, Message::Hangup));
        }
        let pos = self.nodes_of_interest.get(&from).map_or(pos, |c| c.pos);
        self.peers.insert(from, pos);
        DialOutcome::Connected
    }

    /// The link to `from` closed (hangup received or connection lost).
    pub fn on_link_closed(&mut self, from: NodeId) -> bool {
        self.pending_dials.remove(&from);
        self.peers.remove(&from).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> GeoPosition {
        GeoPosition::new(41.15, -8.61).unwrap()
    }

    fn cfg() -> ProtocolConfig {
        ProtocolConfig::default()
    }

    fn ids(out: &[Outbound]) -> Vec<NodeId> {
        out.iter().map(|o| o.to).collect()
    }

    #[test]
    fn first_registration_sees_nobody() {
        let mut s = SignallingState::new(1000.0);
        assert!(s.on_node_pos(NodeId(1), base(), 0).is_empty());
    }

    #[test]
    fn registry_filters_by_distance() {
        let mut s = SignallingState::new(1000.0);
        let near = base().offset(90.0, 600.0);
        let far1 = base().offset(0.0, 1500.0);
        let far2 = base().offset(200.0, 5000.0);
        s.on_node_pos(NodeId(2), near, 0);
        s.on_node_pos(NodeId(3), far1, 0);
        s.on_node_pos(NodeId(4), far2, 0);
        // oracle: brute-force filter over the registry
        let expected: Vec<NodeId> = [(NodeId(2), near), (NodeId(3), far1), (NodeId(4), far2)]
            .into_iter()
            .filter(|(_, p)| distance(base(), *p) <= 1000.0)
            .map(|(id, _)| id)
            .collect();
        let got: Vec<NodeId> = s.on_node_pos(NodeId(1), base(), 1).iter().map(|p| p.id).collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![NodeId(2)]);
    }

    #[test]
    fn reregistration_moves_node() {
        let mut s = SignallingState::new(1000.0);
        s.on_node_pos(NodeId(2), base().offset(0.0, 5000.0), 0);
        assert!(s.on_node_pos(NodeId(1), base(), 0).is_empty());
        s.on_node_pos(NodeId(2), base().offset(0.0, 100.0), 10);
        assert_eq!(s.position(NodeId(2)), Some(base().offset(0.0, 100.0)));
        assert_eq!(s.on_node_pos(NodeId(1), base(), 20).len(), 1);
        assert_eq!(s.history().len(), 4);
    }

    #[test]
    fn join_with_and_without_server() {
        let mut v = PeerView::new(NodeId(1), &cfg(), base(), Some(NodeId(100)));
        let out = v.join(base());
        assert_eq!(ids(&out), vec![NodeId(100)]);
        v.on_server_response(&[PeerInfo { id: NodeId(2), pos: base() }], 5);
        assert!(v.nodes_of_interest().contains_key(&NodeId(2)));

        let mut lone = PeerView::new(NodeId(1), &cfg(), base(), None);
        assert!(lone.join(base()).is_empty());
        assert!(lone.nodes_of_interest().is_empty());
        assert!(matches!(lone.on_dial(NodeId(5), base(), 0), DialAnswer::Accepted(_)));
    }

    #[test]
    fn co_located_nodes_discover_each_other() {
        let mut s = SignallingState::new(1000.0);
        let mut a = PeerView::new(NodeId(1), &cfg(), base(), Some(NodeId(100)));
        let mut b = PeerView::new(NodeId(2), &cfg(), base(), Some(NodeId(100)));
        a.join(base());
        let ra = s.on_node_pos(NodeId(1), base(), 0);
        a.on_server_response(&ra, 0);
        b.join(base());
        let rb = s.on_node_pos(NodeId(2), base(), 1);
        b.on_server_response(&rb, 1);
        assert!(b.nodes_of_interest().contains_key(&NodeId(1)));
    }

    #[test]
    fn no_announcement_without_movement() {
        let mut v = PeerView::new(NodeId(1), &cfg(), base(), Some(NodeId(100)));
        assert!(v.update_position(base(), 0).is_empty());
        assert!(v.update_position(base().offset(10.0, 999.0), 0).is_empty());
    }

    #[test]
    fn announcement_with_server_is_ttl_one() {
        let mut v = PeerView::new(NodeId(1), &cfg(), base(), Some(NodeId(100)));
        for id in 2..=4 {
            v.on_dial(NodeId(id), base(), 0);
        }
        let moved = base().offset(45.0, 1200.0);
        let out = v.update_position(moved, 1000);
        assert_eq!(out.len(), 1 + 3);
        assert_eq!(out[0].to, NodeId(100));
        for o in &out[1..] {
            match &o.msg {
                Message::Position(p) => assert!(!p.propagate),
                m => panic!("{m:?}"),
            }
        }
        assert_eq!(v.last_sent_pos(), moved);
    }

    fn link(a: &mut PeerView, b: &mut PeerView, pa: GeoPosition, pb: GeoPosition) {
        a.on_dial(b.id(), pb, 0);
        b.on_dial(a.id(), pa, 0);
    }

    /// Deliver every message to its destination until none remain; returns
    /// the number of transmissions.
    fn pump(views: &mut BTreeMap<NodeId, PeerView>, pos: &BTreeMap<NodeId, GeoPosition>, mut q: Vec<Outbound>) -> usize {
        let mut sent = 0;
        while !q.is_empty() {
            let mut next = Vec::new();
            for o in q {
                sent += 1;
                if let Message::Position(m) = &o.msg {
                    let v = views.get_mut(&o.to).unwrap();
                    next.extend(v.on_position_message(m, pos[&o.to], 0));
                }
            }
            q = next;
        }
        sent
    }

    #[test]
    fn chain_learns_position_without_server() {
        let pa = base();
        let pb = base().offset(90.0, 800.0);
        let pc = base().offset(90.0, 1600.0);
        let mut a = PeerView::new(NodeId(1), &cfg(), pa, None);
        let mut b = PeerView::new(NodeId(2), &cfg(), pb, None);
        let mut c = PeerView::new(NodeId(3), &cfg(), pc, None);
        link(&mut a, &mut b, pa, pb);
        link(&mut b, &mut c, pb, pc);
        let a_new = pa.offset(90.0, 1100.0);
        let out = a.update_position(a_new, 0);
        assert_eq!(ids(&out), vec![NodeId(2)]);
        let mut views = BTreeMap::from([(NodeId(2), b), (NodeId(3), c)]);
        let pos = BTreeMap::from([(NodeId(2), pb), (NodeId(3), pc)]);
        pump(&mut views, &pos, out);
        let c = &views[&NodeId(3)];
        assert_eq!(c.nodes_of_interest()[&NodeId(1)].pos, a_new);
    }

    #[test]
    fn triangle_flood_bounded_by_edges() {
        let p = base();
        let mut a = PeerView::new(NodeId(1), &cfg(), p, None);
        let mut b = PeerView::new(NodeId(2), &cfg(), p, None);
        let mut c = PeerView::new(NodeId(3), &cfg(), p, None);
        link(&mut a, &mut b, p, p);
        link(&mut b, &mut c, p, p);
        link(&mut a, &mut c, p, p);
        let out = a.update_position(p.offset(0.0, 1500.0), 0);
        let mut views = BTreeMap::from([(NodeId(2), b), (NodeId(3), c)]);
        let pos = BTreeMap::from([(NodeId(2), p), (NodeId(3), p)]);
        let sent = pump(&mut views, &pos, out);
        assert!(sent <= 3, "{sent}");
    }

    #[test]
    fn distant_sender_ignored() {
        let mut v = PeerView::new(NodeId(1), &cfg(), base(), Some(NodeId(100)));
        let m = PositionMessage {
            sender: NodeId(9),
            current_pos: base().offset(0.0, 10_000.0),
            propagate: false,
            visited_peers: BTreeSet::new(),
            notified: BTreeSet::new(),
            seq: 0,
        };
        assert!(v.on_position_message(&m, base(), 0).is_empty());
        assert!(v.nodes_of_interest().is_empty());
        let near = PositionMessage { current_pos: base().offset(0.0, 300.0), ..m };
        v.on_position_message(&near, base(), 0);
        assert!(v.nodes_of_interest().contains_key(&NodeId(9)));
    }

    #[test]
    fn review_steady_state_is_silent() {
        let c = ProtocolConfig { max_peers: 2, ..cfg() };
        let mut v = PeerView::new(NodeId(1), &c, base(), Some(NodeId(100)));
        v.on_dial(NodeId(2), base().offset(0.0, 100.0), 0);
        v.on_dial(NodeId(3), base().offset(0.0, 200.0), 0);
        let r = v.review_peers(base(), 0);
        assert!(r.out.is_empty());
    }

    #[test]
    fn drifting_peer_hung_up() {
        let mut v = PeerView::new(NodeId(1), &cfg(), base(), Some(NodeId(100)));
        v.on_dial(NodeId(2), base().offset(0.0, 900.0), 0);
        assert!(v.review_peers(base(), 0).out.is_empty());
        let m = PositionMessage {
            sender: NodeId(2),
            current_pos: base().offset(0.0, 1001.0),
            propagate: false,
            visited_peers: BTreeSet::new(),
            notified: BTreeSet::new(),
            seq: 0,
        };
        v.on_position_message(&m, base(), 10);
        let r = v.review_peers(base(), 20);
        assert_eq!(r.dropped, vec![NodeId(2)]);
        assert_eq!(r.out, vec![Outbound::new(NodeId(2), Message::Hangup)]);
    }

    #[test]
    fn dials_nearest_five_of_seven() {
        let mut v = PeerView::new(NodeId(1), &cfg(), base(), Some(NodeId(100)));
        let cands: Vec<PeerInfo> = (0..7u64)
            .map(|i| PeerInfo { id: NodeId(10 + i), pos: base().offset(37.0 * i as f64, 900.0 - 110.0 * i as f64) })
            .collect();
        v.on_server_response(&cands, 0);
        let r = v.review_peers(base(), 0);
        // oracle: sort all candidates by distance, take five
        let mut by_dist: Vec<(f64, NodeId)> = cands.iter().map(|c| (distance(base(), c.pos), c.id)).collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut expected: Vec<NodeId> = by_dist.iter().take(5).map(|x| x.1).collect();
        let mut dialed = r.dialed.clone();
        expected.sort();
        dialed.sort();
        assert_eq!(dialed, expected);
        for id in &r.dialed {
            assert_eq!(v.on_dial_ack(*id, true, 1), DialOutcome::Connected);
        }
        assert_eq!(v.peers().len(), 5);
        assert!(v.review_peers(base(), 2).out.is_empty());
    }

    #[test]
    fn rejected_candidate_cools_down() {
        let mut v = PeerView::new(NodeId(1), &cfg(), base(), Some(NodeId(100)));
        v.on_server_response(&[PeerInfo { id: NodeId(2), pos: base() }], 0);
        assert_eq!(v.review_peers(base(), 0).dialed, vec![NodeId(2)]);
        assert_eq!(v.on_dial_ack(NodeId(2), false, 10), DialOutcome::Rejected);
        assert!(v.review_peers(base(), 500).dialed.is_empty());
        v.on_server_response(&[PeerInfo { id: NodeId(2), pos: base() }], 1500);
        assert_eq!(v.review_peers(base(), 1500).dialed, vec![NodeId(2)]);
    }

    #[test]
    fn full_node_rejects_dial() {
        let c = ProtocolConfig { max_peers: 1, ..cfg() };
        let mut v = PeerView::new(NodeId(1), &c, base(), None);
        assert!(matches!(v.on_dial(NodeId(2), base(), 0), DialAnswer::Accepted(_)));
        assert!(matches!(v.on_dial(NodeId(3), base(), 0), DialAnswer::Rejected(_)));
    }

    #[test]
    fn stale_candidates_evicted() {
        let mut v = PeerView::new(NodeId(1), &cfg(), base(), Some(NodeId(100)));
        v.on_server_response(&[PeerInfo { id: NodeId(2), pos: base().offset(0.0, 5000.0) }], 0);
        v.review_peers(base(), 5000);
        assert!(v.nodes_of_interest().contains_key(&NodeId(2)));
        v.review_peers(base(), 5001);
        assert!(v.nodes_of_interest().is_empty());
    }
}
