//! Deterministic discrete-event network.
//!
//! One virtual clock, one priority queue ordered by `(time, seq)` where
//! `seq` is a global enqueue counter, so simultaneous events run in the
//! order they were scheduled. Links are reliable and FIFO per ordered
//! pair of nodes. Every send is counted per channel at send time; every
//! message ends up either delivered or dropped.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::ProtocolConfig;
use crate::geo::NodeId;
use crate::wire::Message;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Peer,
    ClientEdge,
    ClientCloud,
    EdgeCloud,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Peer, Channel::ClientEdge, Channel::ClientCloud, Channel::EdgeCloud];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Peer => "peer",
            Channel::ClientEdge => "client-edge",
            Channel::ClientCloud => "client-cloud",
            Channel::EdgeCloud => "edge-cloud",
        }
    }

    /// Client to object-server traffic, in either direction.
    pub fn is_server(self) -> bool {
        matches!(self, Channel::ClientEdge | Channel::ClientCloud)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Client,
    Edge,
    Cloud,
}

/// Fixed one-way delays of the two latency classes, plus optional jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub peer: u64,
    pub client_edge: u64,
    pub client_cloud: u64,
    pub edge_cloud: u64,
    /// Uniform relative jitter in `[-jitter, +jitter]`; 0 disables it.
    pub jitter: f64,
}

impl LatencyModel {
    pub fn from_config(cfg: &ProtocolConfig) -> Self {
        Self {
            peer: cfg.latency_low,
            client_edge: cfg.latency_low,
            client_cloud: cfg.latency_high,
            edge_cloud: cfg.latency_high,
            jitter: 0.0,
        }
    }

    pub fn base(&self, c: Channel) -> u64 {
        match c {
            Channel::Peer => self.peer,
            Channel::ClientEdge => self.client_edge,
            Channel::ClientCloud => self.client_cloud,
            Channel::EdgeCloud => self.edge_cloud,
        }
    }

    fn sample(&self, c: Channel, rng: &mut ChaCha8Rng) -> u64 {
        let base = self.base(c);
        if self.jitter <= 0.0 {
            return base;
        }
        let f = 1.0 + rng.gen_range(-self.jitter..=self.jitter);
        (base as f64 * f).round().max(0.0) as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes: u64,
    pub data_messages: u64,
    pub data_bytes: u64,
    pub heartbeat_messages: u64,
}

impl ChannelStats {
    pub fn control_messages(&self) -> u64 {
        self.sent - self.data_messages
    }

    pub fn control_bytes(&self) -> u64 {
        self.bytes - self.data_bytes
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("no channel between {a:?} {src} and {b:?} {dst}")]
    NoChannel { src: NodeId, dst: NodeId, a: NodeRole, b: NodeRole },
    #[error("event backlog {backlog} exceeds cap {cap} at t={at} ms; runaway message storm?")]
    Backlog { backlog: usize, cap: usize, at: u64 },
    #[error("node {0} registered twice")]
    Duplicate(NodeId),
}

/// A message in flight.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub src: NodeId,
    pub dst: NodeId,
    pub sent_at: u64,
    pub deliver_at: u64,
    pub size: usize,
    pub channel: Channel,
    pub msg: Message,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event<T> {
    Deliver(Envelope),
    Timer { node: NodeId, timer: T },
}

struct Queued<T> {
    at: u64,
    seq: u64,
    event: Event<T>,
}

impl<T> PartialEq for Queued<T> {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl<T> Eq for Queued<T> {}
impl<T> PartialOrd for Queued<T> {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl<T> Ord for Queued<T> {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

pub const DEFAULT_BACKLOG_CAP: usize = 1_000_000;

/// The simulated network plus the timer wheel. `T` is the caller's timer
/// payload.
pub struct Network<T> {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued<T>>>,
    roles: BTreeMap<NodeId, NodeRole>,
    crashed: BTreeSet<NodeId>,
    link_tail: BTreeMap<(NodeId, NodeId), u64>,
    latency: LatencyModel,
    loss: f64,
    rng: ChaCha8Rng,
    stats: BTreeMap<Channel, ChannelStats>,
    in_flight: u64,
    in_flight_non_heartbeat: u64,
    last_activity: u64,
    backlog_cap: usize,
    processed: u64,
}

impl<T> Network<T> {
    pub fn new(latency: LatencyModel, seed: u64) -> Self {
        Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            roles: BTreeMap::new(),
            crashed: BTreeSet::new(),
            link_tail: BTreeMap::new(),
            latency,
            loss: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: Channel::ALL.iter().map(|c| (*c, ChannelStats::default())).collect(),
            in_flight: 0,
            in_flight_non_heartbeat: 0,
            last_activity: 0,
            backlog_cap: DEFAULT_BACKLOG_CAP,
            processed: 0,
        }
    }

    pub fn with_loss(mut self, loss: f64) -> Self {
        self.loss = loss.clamp(0.0, 1.0);
        self
    }

    pub fn with_backlog_cap(mut self, cap: usize) -> Self {
        self.backlog_cap = cap;
        self
    }

    pub fn add_node(&mut self, id: NodeId, role: NodeRole) -> Result<(), SimError> {
        if self.roles.insert(id, role).is_some() {
            return Err(SimError::Duplicate(id));
        }
        Ok(())
    }

    pub fn role(&self, id: NodeId) -> Option<NodeRole> {
        self.roles.get(&id).copied()
    }

    pub fn crash(&mut self, id: NodeId) {
        self.crashed.insert(id);
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.roles.contains_key(&id) && !self.crashed.contains(&id)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn channel(&self, src: NodeId, dst: NodeId) -> Result<Channel, SimError> {
        let a = self.role(src).ok_or(SimError::UnknownNode(src))?;
        let b = self.role(dst).ok_or(SimError::UnknownNode(dst))?;
        use NodeRole::*;
        match (a, b) {
            (Client, Client) => Ok(Channel::Peer),
            (Client, Edge) | (Edge, Client) => Ok(Channel::ClientEdge),
            (Client, Cloud) | (Cloud, Client) => Ok(Channel::ClientCloud),
            (Edge, Cloud) | (Cloud, Edge) => Ok(Channel::EdgeCloud),
            _ => Err(SimError::NoChannel { src, dst, a, b }),
        }
    }

    /// Send `msg` from `src` to `dst` now. Returns the channel used.
    pub fn send(&mut self, src: NodeId, dst: NodeId, msg: Message) -> Result<Channel, SimError> {
        let channel = self.channel(src, dst)?;
        let size = msg.wire_size();
        let st = self.stats.get_mut(&channel).expect("all channels present");
        st.sent += 1;
        st.bytes += size as u64;
        if msg.is_data() {
            st.data_messages += 1;
            st.data_bytes += size as u64;
        }
        if msg.is_heartbeat() {
            st.heartbeat_messages += 1;
        } else {
            self.last_activity = self.now;
        }

        let lost = self.loss > 0.0 && self.rng.gen_bool(self.loss);
        if self.crashed.contains(&dst) || lost {
            st.dropped += 1;
            return Ok(channel);
        }
        let delay = self.latency.sample(channel, &mut self.rng);
        let tail = self.link_tail.entry((src, dst)).or_insert(0);
        let deliver_at = (self.now + delay).max(*tail);
        *tail = deliver_at;
        self.in_flight += 1;
        if !msg.is_heartbeat() {
            self.in_flight_non_heartbeat += 1;
        }
        let env = Envelope { src, dst, sent_at: self.now, deliver_at, size, channel, msg };
        self.push(deliver_at, Event::Deliver(env))
            .map(|_| channel)
    }

    pub fn set_timer(&mut self, node: NodeId, at: u64, timer: T) -> Result<(), SimError> {
        self.push(at.max(self.now), Event::Timer { node, timer })
    }

    fn push(&mut self, at: u64, event: Event<T>) -> Result<(), SimError> {
        self.seq += 1;
        self.queue.push(Reverse(Queued { at, seq: self.seq, event }));
        if self.queue.len() > self.backlog_cap {
            return Err(SimError::Backlog { backlog: self.queue.len(), cap: self.backlog_cap, at: self.now });
        }
        Ok(())
    }

    /// Pop the next event and advance the clock to it. Messages whose
    /// destination crashed while they were in flight are dropped here and
    /// never returned; timers of crashed nodes are discarded.
    pub fn next_event(&mut self) -> Option<Event<T>> {
        loop {
            let Reverse(q) = self.queue.pop()?;
            debug_assert!(q.at >= self.now, "clock went backwards");
            self.now = q.at;
            self.processed += 1;
            match q.event {
                Event::Deliver(env) => {
                    self.in_flight -= 1;
                    if !env.msg.is_heartbeat() {
                        self.in_flight_non_heartbeat -= 1;
                    }
                    let st = self.stats.get_mut(&env.channel).expect("all channels present");
                    if self.crashed.contains(&env.dst) {
                        st.dropped += 1;
                        continue;
                    }
                    st.delivered += 1;
                    return Some(Event::Deliver(env));
                }
                Event::Timer { node, timer } => {
                    if self.crashed.contains(&node) {
                        continue;
                    }
                    return Some(Event::Timer { node, timer });
                }
            }
        }
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(q)| q.at)
    }

    pub fn stats(&self) -> &BTreeMap<Channel, ChannelStats> {
        &self.stats
    }

    pub fn in_flight(&self) -> u64 {
        self.in_flight
    }

    /// In-flight messages other than heartbeats.
    pub fn busy(&self) -> bool {
        self.in_flight_non_heartbeat > 0
    }

    /// Time of the most recent non-heartbeat send.
    pub fn last_activity(&self) -> u64 {
        self.last_activity
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    /// Per-channel `sent == delivered + dropped + in flight`.
    pub fn conserved(&self) -> bool {
        let flying: u64 = self.in_flight;
        let (s, d, x) = self
            .stats
            .values()
            .fold((0, 0, 0), |(s, d, x), c| (s + c.sent, d + c.delivered, x + c.dropped));
        s == d + x + flying
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::ObjectId;

    fn net() -> Network<u8> {
        let mut n = Network::new(LatencyModel::from_config(&ProtocolConfig::default()), 1);
        n.add_node(NodeId(1), NodeRole::Client).unwrap();
        n.add_node(NodeId(2), NodeRole::Client).unwrap();
        n.add_node(NodeId(10), NodeRole::Edge).unwrap();
        n.add_node(NodeId(20), NodeRole::Cloud).unwrap();
        n
    }

    fn deliver_time(n: &mut Network<u8>) -> u64 {
        match n.next_event() {
            Some(Event::Deliver(e)) => e.deliver_at,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn peer_message_takes_low_latency() {
        let mut n = net();
        n.send(NodeId(1), NodeId(2), Message::Hangup).unwrap();
        assert_eq!(deliver_time(&mut n), 20);
    }

    #[test]
    fn cloud_message_takes_high_latency() {
        let mut n = net();
        assert_eq!(n.send(NodeId(1), NodeId(20), Message::Hangup).unwrap(), Channel::ClientCloud);
        assert_eq!(deliver_time(&mut n), 100);
        assert_eq!(n.send(NodeId(10), NodeId(20), Message::Hangup).unwrap(), Channel::EdgeCloud);
        assert_eq!(n.send(NodeId(1), NodeId(10), Message::Hangup).unwrap(), Channel::ClientEdge);
    }

    #[test]
    fn same_link_is_fifo() {
        let mut n = net();
        n.send(NodeId(1), NodeId(2), Message::FetchReq { object: ObjectId(1) }).unwrap();
        n.send(NodeId(1), NodeId(2), Message::FetchReq { object: ObjectId(2) }).unwrap();
        let mut got = Vec::new();
        while let Some(Event::Deliver(e)) = n.next_event() {
            got.push(e.msg);
        }
        assert_eq!(
            got,
            vec![Message::FetchReq { object: ObjectId(1) }, Message::FetchReq { object: ObjectId(2) }]
        );
    }

    #[test]
    fn fifo_survives_jitter() {
        let mut lat = LatencyModel::from_config(&ProtocolConfig::default());
        lat.jitter = 0.9;
        let mut n: Network<u8> = Network::new(lat, 3);
        n.add_node(NodeId(1), NodeRole::Client).unwrap();
        n.add_node(NodeId(2), NodeRole::Client).unwrap();
        for i in 0..50 {
            n.send(NodeId(1), NodeId(2), Message::FetchReq { object: ObjectId(i) }).unwrap();
        }
        let mut last = 0;
        while let Some(Event::Deliver(e)) = n.next_event() {
            let Message::FetchReq { object } = e.msg else { unreachable!() };
            assert!(object.0 >= last);
            last = object.0;
        }
    }

    #[test]
    fn crashed_destination_drops() {
        let mut n = net();
        n.send(NodeId(1), NodeId(2), Message::Hangup).unwrap();
        n.crash(NodeId(2));
        n.send(NodeId(1), NodeId(2), Message::Hangup).unwrap();
        assert!(n.next_event().is_none());
        let st = n.stats()[&Channel::Peer];
        assert_eq!((st.sent, st.delivered, st.dropped), (2, 0, 2));
        assert!(n.conserved());
    }

    #[test]
    fn timers_interleave_by_time_then_seq() {
        let mut n = net();
        n.set_timer(NodeId(1), 20, 1).unwrap();
        n.send(NodeId(1), NodeId(2), Message::Hangup).unwrap();
        n.set_timer(NodeId(1), 20, 2).unwrap();
        assert!(matches!(n.next_event(), Some(Event::Timer { timer: 1, .. })));
        assert!(matches!(n.next_event(), Some(Event::Deliver(_))));
        assert!(matches!(n.next_event(), Some(Event::Timer { timer: 2, .. })));
        assert_eq!(n.now(), 20);
    }

    #[test]
    fn backlog_cap_aborts() {
        let mut n = net().with_backlog_cap(3);
        for t in 0..3 {
            n.set_timer(NodeId(1), t, 0).unwrap();
        }
        assert!(matches!(n.set_timer(NodeId(1), 9, 0), Err(SimError::Backlog { .. })));
    }

    #[test]
    fn no_client_to_client_server_channel() {
        let mut n = net();
        n.add_node(NodeId(21), NodeRole::Cloud).unwrap();
        assert!(n.send(NodeId(20), NodeId(21), Message::Hangup).is_err());
        assert!(n.send(NodeId(1), NodeId(99), Message::Hangup).is_err());
    }

    #[test]
    fn loss_knob_drops_some() {
        let mut n = net().with_loss(0.5);
        for _ in 0..200 {
            n.send(NodeId(1), NodeId(2), Message::Hangup).unwrap();
        }
        while n.next_event().is_some() {}
        let st = n.stats()[&Channel::Peer];
        assert!(st.dropped > 50 && st.dropped < 150, "{st:?}");
        assert!(n.conserved());
    }
}
