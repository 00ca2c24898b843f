//! The simulated deployment: clients running the overlay, bully and
//! replication state machines, edge servers and the cloud, all driven by
//! one [`Network`].

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    config_hash, IssuedWrite, LatencySample, Metrics, OverlayMode, OverlayReport, RunMeta, RunOptions, RunOutcome,
    ScenarioError, ScenarioKind,
};
use crate::bully::{BullyTable, ClaimOutcome};
use crate::config::ProtocolConfig;
use crate::crdt::{Crdt, CrdtKind, Delta};
use crate::geo::{distance, within, BoundingBox, GeoPosition, NodeId, ObjectId};
use crate::overlay::{DialAnswer, DialOutcome, PeerView, SignallingState};
use crate::replication::{ClientStore, GeoObject, RemoteMerge, ServerDelta, ServerStore};
use crate::simnet::{Event, LatencyModel, Network, NodeRole};
use crate::traces::{Route, Traces};
use crate::wire::{DeltaMsg, DirectoryEntry, Message, Outbound, WriteId};

/// Server ids live above every client id.
pub(crate) const SERVER_BASE: u64 = 1 << 40;
const MAX_HOPS: u8 = 16;
const LATENCY_VALUE_LEN: usize = 32;
const REVIEW_MIN: usize = 500;
const REVIEW_MAX: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Timer {
    Announce,
    Broadcast,
    Write(u32),
}

/// splitmix64 finalizer; derives independent per-entity seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ mix(a.wrapping_mul(31)) ^ b))
}

#[derive(Debug, Clone)]
enum Intent {
    Increment,
    Put { key: String, value: Vec<u8> },
}

#[derive(Debug, Clone)]
struct PendingWrite {
    intent: Intent,
    at: u64,
}

#[derive(Default)]
struct Sink {
    out: Vec<Outbound>,
    samples: Vec<LatencySample>,
    issued: Vec<IssuedWrite>,
    wasted_bytes: u64,
    reviews: Vec<usize>,
}

struct Ctx<'a> {
    cfg: &'a ProtocolConfig,
    mode: OverlayMode,
    scenario: ScenarioKind,
    now: u64,
    pos: GeoPosition,
    seed: u64,
    cloud: NodeId,
    catalog: &'a BTreeMap<ObjectId, DirectoryEntry>,
}

impl Ctx<'_> {
    fn glo(&self) -> bool {
        self.mode.uses_overlay()
    }

    fn server_of(&self, o: ObjectId) -> NodeId {
        self.catalog.get(&o).map_or(self.cloud, |e| e.server)
    }
}

struct Client {
    id: NodeId,
    route: Route,
    view: PeerView,
    bully: BullyTable,
    store: ClientStore,
    peer_interest: BTreeMap<NodeId, BTreeSet<ObjectId>>,
    advertised: Option<BTreeSet<ObjectId>>,
    subscribed: BTreeSet<ObjectId>,
    pending: BTreeMap<ObjectId, Vec<PendingWrite>>,
    seen_writes: BTreeSet<WriteId>,
    relayed: BTreeSet<WriteId>,
    relay_back: BTreeMap<WriteId, NodeId>,
    reviewed: BTreeSet<ObjectId>,
    review_seq: u64,
}

impl Client {
    fn new(route: Route, cfg: &ProtocolConfig, cloud: NodeId) -> Self {
        let id = route.client;
        let start = route.waypoints[0];
        Self {
            id,
            view: PeerView::new(id, cfg, start, Some(cloud)),
            bully: BullyTable::init(id, [], cfg.bully_timeout),
            store: ClientStore::new(id),
            route,
            peer_interest: BTreeMap::new(),
            advertised: None,
            subscribed: BTreeSet::new(),
            pending: BTreeMap::new(),
            seen_writes: BTreeSet::new(),
            relayed: BTreeSet::new(),
            relay_back: BTreeMap::new(),
            reviewed: BTreeSet::new(),
            review_seq: 0,
        }
    }

    fn idle(&self) -> bool {
        self.store.unacked().is_empty() && self.store.pending_fetches().is_empty() && self.pending.is_empty()
    }

    fn send(&self, sink: &mut Sink, to: NodeId, msg: Message) {
        sink.out.push(Outbound::new(to, msg));
    }

    fn interested_peers(&self, o: ObjectId) -> Vec<NodeId> {
        self.view
            .peers()
            .keys()
            .filter(|p| self.peer_interest.get(p).is_some_and(|s| s.contains(&o)))
            .copied()
            .collect()
    }

    fn peer_closed(&mut self, p: NodeId) {
        self.view.on_link_closed(p);
        self.bully.on_peer_disconnect(p);
        self.peer_interest.remove(&p);
    }

    /// Keep one bully entry per object that is interesting or still held.
    fn sync_bully(&mut self) {
        let want: BTreeSet<ObjectId> =
            self.store.interest().iter().chain(self.store.objects().keys()).copied().collect();
        let have: Vec<ObjectId> = self.bully.objects().map(|(o, _)| *o).collect();
        for o in have {
            if !want.contains(&o) {
                self.bully.remove_object(o);
            }
        }
        for o in want {
            self.bully.add_object(o);
        }
    }

    fn advertise_interest(&mut self, sink: &mut Sink) {
        let now = self.store.interest().clone();
        if self.advertised.as_ref() == Some(&now) {
            return;
        }
        let objects: Vec<ObjectId> = now.iter().copied().collect();
        for &p in self.view.peers().keys() {
            sink.out.push(Outbound::new(p, Message::Interest { objects: objects.clone() }));
        }
        self.advertised = Some(now);
    }

    fn send_interest_to(&self, p: NodeId, sink: &mut Sink) {
        let objects: Vec<ObjectId> = self.store.interest().iter().copied().collect();
        self.send(sink, p, Message::Interest { objects });
    }

    fn fetch(&mut self, ctx: &Ctx, o: ObjectId, sink: &mut Sink) {
        let peer = if ctx.glo() { self.interested_peers(o).into_iter().next() } else { None };
        match peer {
            Some(p) => {
                self.store.mark_fetching(o, p, ctx.now);
                self.send(sink, p, Message::FetchReq { object: o });
            }
            None => self.fetch_from_server(ctx, o, sink),
        }
    }

    fn fetch_from_server(&mut self, ctx: &Ctx, o: ObjectId, sink: &mut Sink) {
        let s = ctx.server_of(o);
        self.store.mark_fetching(o, s, ctx.now);
        self.subscribed.insert(o);
        self.send(sink, s, Message::FetchReq { object: o });
    }

    fn on_enter(&mut self, ctx: &Ctx, o: ObjectId) {
        let kind = ctx.catalog.get(&o).map(|e| e.kind);
        match ctx.scenario {
            ScenarioKind::Checkin if kind == Some(CrdtKind::Counter) => {
                self.pending.entry(o).or_default().push(PendingWrite { intent: Intent::Increment, at: ctx.now });
            }
            ScenarioKind::Review if kind == Some(CrdtKind::Map) => {
                if !self.reviewed.insert(o) {
                    return;
                }
                let mut rng = rng_for(ctx.seed, self.id.0, o.0);
                if !rng.gen_bool(ctx.cfg.review_probability) {
                    return;
                }
                let len = rng.gen_range(REVIEW_MIN..=REVIEW_MAX);
                let value: Vec<u8> = (0..len).map(|_| rng.gen_range(b'a'..=b'z')).collect();
                let key = format!("review/{}/{}", self.id.0, self.review_seq);
                self.review_seq += 1;
                self.pending.entry(o).or_default().push(PendingWrite { intent: Intent::Put { key, value }, at: ctx.now });
            }
            _ => {}
        }
    }

    fn latency_write(&mut self, ctx: &Ctx, k: u32, object: ObjectId) {
        let mut rng = rng_for(ctx.seed, self.id.0, u64::from(k) | (1 << 48));
        let value: Vec<u8> = (0..LATENCY_VALUE_LEN).map(|_| rng.gen_range(b'a'..=b'z')).collect();
        let key = format!("op/{}/{}", self.id.0, k);
        self.pending.entry(object).or_default().push(PendingWrite { intent: Intent::Put { key, value }, at: ctx.now });
    }

    fn apply_pending(&mut self, ctx: &Ctx, sink: &mut Sink) -> Result<(), ScenarioError> {
        let ready: Vec<ObjectId> = self.pending.keys().filter(|o| self.store.holds(**o)).copied().collect();
        for o in ready {
            for w in self.pending.remove(&o).unwrap_or_default() {
                let (write, delta) = self
                    .store
                    .mutate(o, ctx.now, |c, me| match (c, &w.intent) {
                        (Crdt::Counter(c), Intent::Increment) => Crdt::Counter(c.increment(me, 1)),
                        (Crdt::Map(m), Intent::Put { key, value }) => Crdt::Map(m.put(key, value.clone(), me, w.at)),
                        (c, _) => Crdt::empty(c.kind()),
                    })
                    .map_err(|e| ScenarioError::Protocol(e.to_string()))?;
                sink.issued.push(IssuedWrite { object: o, write, delta: delta.clone() });
                self.disseminate(ctx, o, write, delta, sink);
            }
        }
        Ok(())
    }

    /// Route a fresh local write: interested peers directly, the server
    /// directly when self is bully, else through the next hop towards the
    /// bully.
    fn disseminate(&mut self, ctx: &Ctx, o: ObjectId, write: WriteId, delta: Delta, sink: &mut Sink) {
        self.seen_writes.insert(write);
        let base = DeltaMsg {
            object: o,
            delta,
            write,
            issued_at: ctx.now,
            seen: BTreeSet::from([self.id]),
            relay: false,
            hops: 0,
        };
        if !ctx.glo() {
            self.send(sink, ctx.server_of(o), Message::Delta(base));
            return;
        }
        let targets = self.interested_peers(o);
        let hop = self.bully.next_hop(o).filter(|h| self.view.is_peer(*h));
        let mut seen = base.seen.clone();
        seen.extend(targets.iter().copied());
        if let Some(h) = hop {
            seen.insert(h);
        }
        for &t in &targets {
            let m = DeltaMsg { seen: seen.clone(), relay: Some(t) == hop, ..base.clone() };
            self.send(sink, t, Message::Delta(m));
        }
        match hop {
            Some(h) if !targets.contains(&h) => {
                let m = DeltaMsg { seen, relay: true, ..base };
                self.send(sink, h, Message::Delta(m));
            }
            Some(_) => {}
            None => self.send(sink, ctx.server_of(o), Message::Delta(DeltaMsg { seen, ..base })),
        }
    }

    fn on_delta(&mut self, ctx: &Ctx, from: NodeId, d: DeltaMsg, size: usize, sink: &mut Sink) -> Result<(), ScenarioError> {
        let o = d.object;
        let first = self.seen_writes.insert(d.write);
        let mut forward: Vec<NodeId> = Vec::new();
        if first {
            match self.store.merge_remote(o, &d.delta).map_err(|e| ScenarioError::Protocol(e.to_string()))? {
                RemoteMerge::NotHeld => sink.wasted_bytes += size as u64,
                RemoteMerge::Changed | RemoteMerge::Unchanged => {
                    if d.write.origin != self.id {
                        sink.samples.push(LatencySample {
                            origin: d.write.origin,
                            seq: d.write.seq,
                            receiver: self.id,
                            issued_at: d.issued_at,
                            received_at: ctx.now,
                        });
                    }
                }
            }
            if ctx.glo() && d.hops < MAX_HOPS {
                forward = self
                    .interested_peers(o)
                    .into_iter()
                    .filter(|p| *p != from && !d.seen.contains(p))
                    .collect();
            }
        }
        let mut relay_to: Option<NodeId> = None;
        let mut relay_server = false;
        if ctx.glo() && d.relay && self.relayed.insert(d.write) {
            self.relay_back.insert(d.write, from);
            match self.bully.next_hop(o).filter(|h| self.view.is_peer(*h) && *h != from) {
                Some(h) if d.hops < MAX_HOPS => relay_to = Some(h),
                _ => relay_server = true,
            }
        }
        let mut seen = d.seen.clone();
        seen.insert(self.id);
        seen.extend(forward.iter().copied());
        seen.extend(relay_to);
        let base = DeltaMsg { seen, relay: false, hops: d.hops + 1, ..d };
        for &t in &forward {
            let m = DeltaMsg { relay: Some(t) == relay_to, ..base.clone() };
            self.send(sink, t, Message::Delta(m));
        }
        if let Some(h) = relay_to.filter(|h| !forward.contains(h)) {
            self.send(sink, h, Message::Delta(DeltaMsg { relay: true, ..base.clone() }));
        }
        if relay_server {
            self.send(sink, ctx.server_of(o), Message::Delta(base));
        }
        Ok(())
    }

    fn on_announce(&mut self, ctx: &Ctx, outage: bool, sink: &mut Sink) -> Result<(), ScenarioError> {
        let (now, pos) = (ctx.now, ctx.pos);
        if ctx.glo() {
            if outage && self.view.server().is_some() {
                self.view.server_lost();
            } else if !outage && self.view.server().is_none() {
                sink.out.extend(self.view.on_redirect(ctx.cloud, pos));
            }
            sink.out.extend(self.view.update_position(pos, now));
            let review = self.view.review_peers(pos, now);
            sink.out.extend(review.out);
            for p in review.dropped {
                self.peer_closed(p);
            }
            sink.reviews.push(self.view.peers().len());
        }

        let change = self.store.refresh_interest(pos, ctx.cfg.interest_radius, ctx.mode == OverlayMode::GloFull);
        for o in &change.evicted {
            if !ctx.glo() && self.subscribed.remove(o) {
                self.send(sink, ctx.server_of(*o), Message::Unsubscribe { object: *o });
            }
        }
        for &o in &change.entered {
            self.on_enter(ctx, o);
        }
        if ctx.glo() {
            self.sync_bully();
            self.advertise_interest(sink);
        }
        for &o in &change.to_fetch {
            self.fetch(ctx, o, sink);
        }
        let stale: Vec<ObjectId> = self
            .store
            .pending_fetches()
            .iter()
            .filter(|(_, f)| f.since + ctx.cfg.ack_timeout() <= now)
            .map(|(o, _)| *o)
            .collect();
        for o in stale {
            self.fetch_from_server(ctx, o, sink);
        }
        for (w, u) in self.store.overdue(now, ctx.cfg.ack_timeout()) {
            let m = DeltaMsg {
                object: u.object,
                delta: u.delta,
                write: w,
                issued_at: u.issued_at,
                seen: BTreeSet::from([self.id]),
                relay: false,
                hops: 0,
            };
            self.send(sink, ctx.server_of(u.object), Message::Delta(m));
        }
        self.apply_pending(ctx, sink)?;

        if ctx.glo() {
            self.bully.expire(now);
            let want: BTreeSet<ObjectId> =
                self.store.objects().keys().filter(|o| self.bully.is_bully(**o)).copied().collect();
            let drop: Vec<ObjectId> = self.subscribed.difference(&want).copied().collect();
            for o in drop {
                if self.store.pending_fetch(o).is_some_and(|f| f.source == ctx.server_of(o)) {
                    continue;
                }
                self.subscribed.remove(&o);
                self.send(sink, ctx.server_of(o), Message::Unsubscribe { object: o });
            }
            let add: Vec<ObjectId> = want.difference(&self.subscribed).copied().collect();
            for o in add {
                self.subscribed.insert(o);
                self.send(sink, ctx.server_of(o), Message::Subscribe { object: o });
            }
        }
        Ok(())
    }

    fn on_broadcast(&mut self, ctx: &Ctx, sink: &mut Sink) {
        self.bully.expire(ctx.now);
        for claim in self.bully.broadcast() {
            for p in self.interested_peers(claim.object) {
                self.send(sink, p, Message::ImTheBully(claim));
            }
        }
    }

    fn on_message(
        &mut self,
        ctx: &Ctx,
        from: NodeId,
        msg: Message,
        size: usize,
        sink: &mut Sink,
    ) -> Result<(), ScenarioError> {
        let now = ctx.now;
        match msg {
            Message::PeerList { peers, directory } => {
                self.view.on_server_response(&peers, now);
                self.store.learn(directory);
            }
            Message::Redirect { server } => {
                sink.out.extend(self.view.on_redirect(server, ctx.pos));
            }
            Message::Position(m) => {
                sink.out.extend(self.view.on_position_message(&m, ctx.pos, now));
            }
            Message::Dial { node, pos } => match self.view.on_dial(node, pos, now) {
                DialAnswer::Accepted(o) => {
                    sink.out.push(o);
                    self.send_interest_to(node, sink);
                }
                DialAnswer::Rejected(o) => sink.out.push(o),
            },
            Message::DialAck { accept } => match self.view.on_dial_ack(from, accept, now) {
                DialOutcome::Connected => self.send_interest_to(from, sink),
                DialOutcome::Overfull(o) => sink.out.push(o),
                DialOutcome::AlreadyPeer | DialOutcome::Rejected | DialOutcome::Unexpected => {}
            },
            Message::Hangup => self.peer_closed(from),
            Message::Interest { objects } => {
                if self.view.is_peer(from) {
                    self.peer_interest.insert(from, objects.into_iter().collect());
                }
            }
            Message::ImTheBully(claim) => match self.bully.on_claim(&claim, from, now) {
                ClaimOutcome::Accepted { forward: true, .. } => {
                    for p in self.interested_peers(claim.object) {
                        if p != from && p != claim.sender {
                            self.send(sink, p, Message::ImTheBully(claim));
                        }
                    }
                }
                ClaimOutcome::CounterClaim(c) => self.send(sink, from, Message::ImTheBully(c)),
                _ => {}
            },
            Message::FetchReq { object } => match self.store.get(object) {
                Some(obj) => self.send(sink, from, Message::FetchReply { object: obj.clone() }),
                None => self.send(sink, from, Message::FetchNack { object }),
            },
            Message::FetchReply { object } => {
                let o = object.id;
                if self.store.pending_fetch(o).is_none() && !self.store.is_interested(o) {
                    sink.wasted_bytes += object.payload.serialized_size() as u64;
                    return Ok(());
                }
                self.store.install(object).map_err(|e| ScenarioError::Protocol(e.to_string()))?;
                if ctx.glo() {
                    self.sync_bully();
                }
                self.apply_pending(ctx, sink)?;
            }
            Message::FetchNack { object } => {
                if self.store.pending_fetch(object).is_some_and(|f| f.source == from) {
                    self.fetch_from_server(ctx, object, sink);
                }
            }
            Message::Delta(d) => self.on_delta(ctx, from, d, size, sink)?,
            Message::Ack { object, write } => {
                if self.store.on_ack(write).is_none() {
                    if let Some(back) = self.relay_back.remove(&write) {
                        self.send(sink, back, Message::Ack { object, write });
                    }
                }
            }
            Message::JoinOrPos { .. } | Message::Subscribe { .. } | Message::Unsubscribe { .. } => {}
        }
        Ok(())
    }
}

struct Server {
    store: ServerStore,
    signalling: SignallingState,
    waiting: BTreeMap<ObjectId, BTreeSet<NodeId>>,
}

struct Deployment<'a> {
    cloud: NodeId,
    regions: &'a [(BoundingBox, NodeId)],
    catalog: &'a BTreeMap<ObjectId, DirectoryEntry>,
    full_catalog: bool,
    directory_radius: f64,
}

impl Deployment<'_> {
    fn signalling_for(&self, pos: GeoPosition) -> NodeId {
        self.regions.iter().find(|(b, _)| b.contains(pos)).map_or(self.cloud, |(_, id)| *id)
    }
}

impl Server {
    fn on_message(
        &mut self,
        dep: &Deployment,
        now: u64,
        from: NodeId,
        from_client: bool,
        msg: Message,
        out: &mut Vec<Outbound>,
    ) -> Result<(), ScenarioError> {
        let me = self.store.id();
        let err = |e: crate::replication::ReplicationError| ScenarioError::Protocol(e.to_string());
        match msg {
            Message::JoinOrPos { node, pos } => {
                let target = dep.signalling_for(pos);
                if target != me {
                    self.signalling.forget(node);
                    out.push(Outbound::new(from, Message::Redirect { server: target }));
                } else {
                    let peers = self.signalling.on_node_pos(node, pos, now);
                    let directory = if dep.full_catalog {
                        Vec::new()
                    } else {
                        dep.catalog.values().filter(|e| within(pos, e.pos, dep.directory_radius)).copied().collect()
                    };
                    out.push(Outbound::new(from, Message::PeerList { peers, directory }));
                }
            }
            Message::FetchReq { object } => match self.store.get(object).cloned() {
                Some(obj) => {
                    if from_client {
                        self.store.subscribe(object, from);
                    }
                    out.push(Outbound::new(from, Message::FetchReply { object: obj }));
                }
                None => match self.store.upstream() {
                    Some(up) => {
                        if from_client {
                            self.store.subscribe(object, from);
                        }
                        if self.waiting.entry(object).or_default().insert(from) {
                            out.push(Outbound::new(up, Message::FetchReq { object }));
                        }
                    }
                    None => out.push(Outbound::new(from, Message::FetchNack { object })),
                },
            },
            Message::FetchReply { object } => {
                let o = object.id;
                self.store.install_from_upstream(object).map_err(err)?;
                let obj = self.store.get(o).expect("just installed").clone();
                for w in self.waiting.remove(&o).unwrap_or_default() {
                    out.push(Outbound::new(w, Message::FetchReply { object: obj.clone() }));
                }
            }
            Message::Delta(d) => {
                let o = d.object;
                let result = self.store.on_delta(o, &d.delta).map_err(err)?;
                if from_client {
                    out.push(Outbound::new(from, Message::Ack { object: o, write: d.write }));
                }
                let changed = match result {
                    ServerDelta::Merged { changed } => changed,
                    ServerDelta::Parked => {
                        if let Some(up) = self.store.upstream() {
                            if self.waiting.entry(o).or_default().is_empty() {
                                out.push(Outbound::new(up, Message::FetchReq { object: o }));
                            }
                        }
                        true
                    }
                };
                if changed {
                    let push = DeltaMsg { seen: BTreeSet::new(), relay: false, hops: 0, ..d };
                    for s in self.store.subscribers(o).filter(|s| *s != from) {
                        out.push(Outbound::new(s, Message::Delta(push.clone())));
                    }
                    if let Some(up) = self.store.upstream() {
                        out.push(Outbound::new(up, Message::Delta(push)));
                    }
                }
            }
            Message::Subscribe { object } => {
                self.store.subscribe(object, from);
            }
            Message::Unsubscribe { object } => {
                self.store.unsubscribe(object, from);
            }
            Message::Ack { .. } | Message::FetchNack { .. } => {}
            other => {
                return Err(ScenarioError::Protocol(format!("server {me} got unexpected {}", other.name())));
            }
        }
        Ok(())
    }
}

pub(crate) struct World<'a> {
    opts: &'a RunOptions,
    meta: RunMeta,
    net: Network<Timer>,
    clients: BTreeMap<NodeId, Client>,
    servers: BTreeMap<NodeId, Server>,
    cloud: NodeId,
    regions: Vec<(BoundingBox, NodeId)>,
    catalog: BTreeMap<ObjectId, DirectoryEntry>,
    horizon: u64,
    samples: Vec<LatencySample>,
    issued: Vec<IssuedWrite>,
    wasted_bytes: u64,
    overlay: OverlayReport,
    flood_links: BTreeMap<(NodeId, u64), u64>,
    flood_sends: BTreeMap<(NodeId, u64), u64>,
}

impl<'a> World<'a> {
    pub(crate) fn new(opts: &'a RunOptions, traces: &Traces) -> Result<Self, ScenarioError> {
        let cfg = &opts.config;
        let mut lat = LatencyModel::from_config(cfg);
        lat.jitter = opts.jitter;
        let mut net = Network::new(lat, mix(cfg.seed ^ 0x5eed))
            .with_loss(opts.loss)
            .with_backlog_cap(opts.backlog_cap);

        let cloud = NodeId(SERVER_BASE);
        net.add_node(cloud, NodeRole::Cloud)?;
        let mut regions = Vec::new();
        if opts.edge_grid.0 > 0 && opts.edge_grid.1 > 0 {
            let bbox = traces_bbox(traces);
            for (i, cell) in bbox.grid(opts.edge_grid.0, opts.edge_grid.1).into_iter().enumerate() {
                let id = NodeId(SERVER_BASE + 1 + i as u64);
                net.add_node(id, NodeRole::Edge)?;
                regions.push((cell, id));
            }
        }

        let kind: CrdtKind = opts.scenario.object_kind().into();
        let mut catalog = BTreeMap::new();
        let mut servers = BTreeMap::new();
        let mut cloud_store = ServerStore::cloud(cloud);
        let mut edge_stores: BTreeMap<NodeId, ServerStore> =
            regions.iter().map(|(b, id)| (*id, ServerStore::edge(*id, *b, cloud))).collect();
        for p in &traces.objects {
            let obj = GeoObject { id: p.object, pos: p.pos, payload: Crdt::empty(kind) };
            let server = regions.iter().find(|(b, _)| b.contains(p.pos)).map_or(cloud, |(_, id)| *id);
            if server != cloud {
                edge_stores.get_mut(&server).expect("edge exists").seed(obj.clone()).map_err(|e| ScenarioError::Setup(e.to_string()))?;
            }
            cloud_store.seed(obj).map_err(|e| ScenarioError::Setup(e.to_string()))?;
            catalog.insert(p.object, DirectoryEntry { object: p.object, pos: p.pos, kind, server });
        }
        let sig = || SignallingState::new(cfg.max_distance);
        servers.insert(cloud, Server { store: cloud_store, signalling: sig(), waiting: BTreeMap::new() });
        for (id, store) in edge_stores {
            servers.insert(id, Server { store, signalling: sig(), waiting: BTreeMap::new() });
        }

        let mut clients = BTreeMap::new();
        let mut horizon = 0;
        for r in &traces.routes {
            if r.client.0 >= SERVER_BASE {
                return Err(ScenarioError::Setup(format!("client id {} collides with server ids", r.client.0)));
            }
            net.add_node(r.client, NodeRole::Client)?;
            horizon = horizon.max(opts.warmup_ms + r.duration());
            clients.insert(r.client, Client::new(r.clone(), cfg, cloud));
        }
        if opts.scenario == ScenarioKind::Latency {
            horizon = opts.warmup_ms + opts.latency_interval_ms * opts.latency_writes.saturating_sub(1) as u64;
        }
        if let Some((_, end)) = opts.signalling_outage {
            horizon = horizon.max(end);
        }

        let meta = RunMeta {
            scenario: opts.scenario,
            mode: opts.mode,
            seed: cfg.seed,
            config_hash: config_hash(opts, traces),
        };
        Ok(Self {
            opts,
            meta,
            net,
            clients,
            servers,
            cloud,
            regions,
            catalog,
            horizon,
            samples: Vec::new(),
            issued: Vec::new(),
            wasted_bytes: 0,
            overlay: OverlayReport::default(),
            flood_links: BTreeMap::new(),
            flood_sends: BTreeMap::new(),
        })
    }

    fn position(&self, c: &Client, now: u64) -> GeoPosition {
        c.route.position_at(now.saturating_sub(self.opts.warmup_ms))
    }

    fn outage(&self, now: u64) -> bool {
        self.opts.signalling_outage.is_some_and(|(s, e)| now >= s && now < e)
    }

    fn links(&self) -> u64 {
        let mut pairs = BTreeSet::new();
        for (id, c) in &self.clients {
            for p in c.view.peers().keys() {
                pairs.insert(if id < p { (*id, *p) } else { (*p, *id) });
            }
        }
        pairs.len() as u64
    }

    /// `links` is the overlay link count before `src` acted, the topology
    /// any flood it originates starts from.
    fn dispatch(&mut self, src: NodeId, out: Vec<Outbound>, links: Option<u64>) -> Result<(), ScenarioError> {
        for o in out {
            if let Message::Position(p) = &o.msg {
                if p.propagate {
                    let key = (p.sender, p.seq);
                    if src == p.sender && !self.flood_links.contains_key(&key) {
                        let links = links.unwrap_or_else(|| self.links());
                        self.flood_links.insert(key, links);
                    }
                    *self.flood_sends.entry(key).or_insert(0) += 1;
                }
            }
            self.net.send(src, o.to, o.msg)?;
        }
        Ok(())
    }

    fn absorb(&mut self, src: NodeId, sink: Sink, links: Option<u64>) -> Result<(), ScenarioError> {
        self.samples.extend(sink.samples);
        self.issued.extend(sink.issued);
        self.wasted_bytes += sink.wasted_bytes;
        for degree in sink.reviews {
            self.overlay.reviews += 1;
            self.overlay.max_degree = self.overlay.max_degree.max(degree);
            if degree > self.opts.config.max_peers {
                self.overlay.degree_violations += 1;
            }
        }
        self.dispatch(src, sink.out, links)
    }

    fn with_client(
        &mut self,
        id: NodeId,
        f: impl FnOnce(&mut Client, &Ctx, &mut Sink) -> Result<(), ScenarioError>,
    ) -> Result<(), ScenarioError> {
        let now = self.net.now();
        let links = self.opts.mode.uses_overlay().then(|| self.links());
        let Some(mut c) = self.clients.remove(&id) else {
            return Err(ScenarioError::Setup(format!("no client {id}")));
        };
        let pos = self.position(&c, now);
        let mut sink = Sink::default();
        let ctx = Ctx {
            cfg: &self.opts.config,
            mode: self.opts.mode,
            scenario: self.opts.scenario,
            now,
            pos,
            seed: self.opts.config.seed,
            cloud: self.cloud,
            catalog: &self.catalog,
        };
        let r = f(&mut c, &ctx, &mut sink);
        self.clients.insert(id, c);
        r?;
        self.absorb(id, sink, links)
    }

    fn start(&mut self) -> Result<(), ScenarioError> {
        let cfg = &self.opts.config;
        let (announce, broadcast) = (cfg.announcement_time, cfg.broadcast_time);
        let ids: Vec<NodeId> = self.clients.keys().copied().collect();
        let catalog: Vec<DirectoryEntry> = self.catalog.values().copied().collect();
        for &id in &ids {
            let mode = self.opts.mode;
            let c = self.clients.get_mut(&id).expect("listed");
            if mode != OverlayMode::GloPartial {
                c.store.learn(catalog.iter().copied());
            }
            if mode.uses_overlay() {
                let pos = c.route.waypoints[0];
                let out = c.view.join(pos);
                self.dispatch(id, out, None)?;
                self.net.set_timer(id, broadcast, Timer::Broadcast)?;
            }
            self.net.set_timer(id, announce, Timer::Announce)?;
            if self.opts.scenario == ScenarioKind::Latency {
                self.net.set_timer(id, self.opts.warmup_ms, Timer::Write(0))?;
            }
        }
        Ok(())
    }

    fn on_timer(&mut self, id: NodeId, t: Timer) -> Result<(), ScenarioError> {
        let now = self.net.now();
        let cfg = self.opts.config.clone();
        match t {
            Timer::Announce => {
                let outage = self.outage(now);
                self.with_client(id, |c, ctx, sink| c.on_announce(ctx, outage, sink))?;
                self.net.set_timer(id, now + cfg.announcement_time, Timer::Announce)?;
            }
            Timer::Broadcast => {
                self.with_client(id, |c, ctx, sink| {
                    c.on_broadcast(ctx, sink);
                    Ok(())
                })?;
                self.net.set_timer(id, now + cfg.broadcast_time, Timer::Broadcast)?;
            }
            Timer::Write(k) => {
                let object = *self.catalog.keys().next().ok_or_else(|| ScenarioError::Setup("no object".into()))?;
                self.with_client(id, |c, ctx, sink| {
                    c.latency_write(ctx, k, object);
                    c.apply_pending(ctx, sink)
                })?;
                if (k as usize) + 1 < self.opts.latency_writes {
                    self.net.set_timer(id, now + self.opts.latency_interval_ms, Timer::Write(k + 1))?;
                }
            }
        }
        Ok(())
    }

    fn on_deliver(&mut self, env: crate::simnet::Envelope) -> Result<(), ScenarioError> {
        let (src, dst, size) = (env.src, env.dst, env.size);
        if self.clients.contains_key(&dst) {
            return self.with_client(dst, |c, ctx, sink| c.on_message(ctx, src, env.msg, size, sink));
        }
        let now = self.net.now();
        let from_client = self.clients.contains_key(&src);
        let dep = Deployment {
            cloud: self.cloud,
            regions: &self.regions,
            catalog: &self.catalog,
            full_catalog: self.opts.mode != OverlayMode::GloPartial,
            directory_radius: self.opts.config.directory_radius(),
        };
        let server = self
            .servers
            .get_mut(&dst)
            .ok_or_else(|| ScenarioError::Protocol(format!("message to unknown node {dst}")))?;
        let mut out = Vec::new();
        server.on_message(&dep, now, src, from_client, env.msg, &mut out)?;
        self.dispatch(dst, out, None)
    }

    fn quiet(&self, next: u64) -> bool {
        let grace = self.opts.grace_ms();
        next >= self.horizon
            && !self.net.busy()
            && next >= self.net.last_activity().max(self.horizon) + grace
            && self.clients.values().all(Client::idle)
    }

    pub(crate) fn run(mut self) -> Result<RunOutcome, ScenarioError> {
        self.start()?;
        let cap = self.horizon + self.opts.max_overrun_ms;
        let mut quiesced = false;
        while let Some(next) = self.net.peek_time() {
            if self.quiet(next) {
                quiesced = true;
                break;
            }
            if next > cap {
                break;
            }
            match self.net.next_event() {
                Some(Event::Deliver(env)) => self.on_deliver(env)?,
                Some(Event::Timer { node, timer }) => self.on_timer(node, timer)?,
                None => break,
            }
        }
        Ok(self.finish(quiesced))
    }

    fn finish(mut self, quiesced: bool) -> RunOutcome {
        let now = self.net.now();
        let cfg = &self.opts.config;
        self.overlay.floods = self.flood_links.len() as u64;
        for (key, links) in &self.flood_links {
            let sends = self.flood_sends.get(key).copied().unwrap_or(0);
            self.overlay.max_flood_transmissions = self.overlay.max_flood_transmissions.max(sends);
            if sends > *links {
                self.overlay.flood_violations += 1;
            }
        }
        self.overlay.links_at_end = self.links() as usize;
        // Judged on true positions, not the possibly stale ones the
        // endpoints last heard.
        for c in self.clients.values() {
            let me = self.position(c, now);
            for p in c.view.peers().keys() {
                let Some(peer) = self.clients.get(p) else { continue };
                let span = distance(me, self.position(peer, now));
                self.overlay.max_link_span_m = self.overlay.max_link_span_m.max(span);
                if span > cfg.max_distance {
                    self.overlay.locality_violations += 1;
                }
            }
            if c.view.peers().len() > cfg.max_peers {
                self.overlay.degree_violations += 1;
            }
        }

        let cloud: BTreeMap<ObjectId, Crdt> = self.servers[&self.cloud]
            .store
            .objects()
            .iter()
            .map(|(o, obj)| (*o, obj.payload.clone()))
            .collect();
        let missing = self
            .issued
            .iter()
            .filter(|w| !cloud.get(&w.object).is_some_and(|c| c.includes(&w.delta)))
            .count() as u64;

        let mut metrics = Metrics::from_channels(self.net.stats().clone());
        metrics.writes_issued = self.issued.len() as u64;
        metrics.wasted_bytes = self.wasted_bytes;
        metrics.latencies = self.samples;
        metrics.end_time_ms = now;
        metrics.events = self.net.events_processed();
        metrics.quiesced = quiesced;
        metrics.overlay = self.overlay;
        metrics.missing_deltas = missing;
        debug_assert!(self.net.conserved());
        RunOutcome { meta: self.meta, metrics, cloud, issued: self.issued }
    }
}

/// Bounding box of every waypoint and object, padded so no point sits on
/// the exclusive upper edge.
pub(crate) fn traces_bbox(t: &Traces) -> BoundingBox {
    let pts = t.routes.iter().flat_map(|r| r.waypoints.iter()).chain(t.objects.iter().map(|o| &o.pos));
    let (mut a, mut b, mut c, mut d) = (90.0f64, 180.0f64, -90.0f64, -180.0f64);
    for p in pts {
        a = a.min(p.lat());
        b = b.min(p.lon());
        c = c.max(p.lat());
        d = d.max(p.lon());
    }
    let pad = 1e-6;
    BoundingBox::new((a - pad).max(-90.0), (b - pad).max(-180.0), (c + pad).min(90.0), (d + pad).min(180.0))
        .expect("padded bounds of valid positions")
}
