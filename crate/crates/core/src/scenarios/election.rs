//! Exhaustive bully checks over small overlays: every connected topology
//! up to a handful of nodes, with and without one crash.

use std::collections::{BTreeMap, BTreeSet};

use crate::bully::{BullyTable, ClaimOutcome};
use crate::config::ProtocolConfig;
use crate::geo::{NodeId, ObjectId};
use crate::simnet::{Event, LatencyModel, Network, NodeRole};
use crate::wire::Message;

const OBJECT: ObjectId = ObjectId(1);

/// Undirected graph over nodes `1..=n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub n: usize,
    pub edges: Vec<(u64, u64)>,
}

impl Topology {
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (1..=self.n as u64).map(NodeId)
    }

    fn neighbours(&self, v: NodeId) -> Vec<NodeId> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == v.0 {
                    Some(NodeId(b))
                } else if b == v.0 {
                    Some(NodeId(a))
                } else {
                    None
                }
            })
            .collect()
    }

    /// Lowest id reachable from `v` without passing through `dead`.
    pub fn lowest_reachable(&self, v: NodeId, dead: Option<NodeId>) -> NodeId {
        let mut seen = BTreeSet::from([v]);
        let mut stack = vec![v];
        while let Some(x) = stack.pop() {
            for y in self.neighbours(x) {
                if Some(y) != dead && seen.insert(y) {
                    stack.push(y);
                }
            }
        }
        *seen.iter().next().expect("contains v")
    }
}

/// Every connected labelled graph on 1..=`max_n` nodes.
pub fn connected_topologies(max_n: usize) -> Vec<Topology> {
    let mut out = Vec::new();
    for n in 1..=max_n {
        let pairs: Vec<(u64, u64)> =
            (1..=n as u64).flat_map(|a| ((a + 1)..=n as u64).map(move |b| (a, b))).collect();
        for mask in 0u32..(1 << pairs.len()) {
            let edges: Vec<(u64, u64)> =
                pairs.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, e)| *e).collect();
            let t = Topology { n, edges };
            if t.nodes().all(|v| t.lowest_reachable(v, None) == NodeId(1)) {
                out.push(t);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectionOutcome {
    /// Bully each surviving node settled on.
    pub bullies: BTreeMap<NodeId, NodeId>,
    /// Lowest surviving id in each survivor's component.
    pub expected: BTreeMap<NodeId, NodeId>,
    pub messages: u64,
}

impl ElectionOutcome {
    pub fn correct(&self) -> bool {
        self.bullies == self.expected
    }

    /// Exactly one self-declared bully per component.
    pub fn unique_per_component(&self) -> bool {
        let mut by_component: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for (v, b) in &self.bullies {
            if v == b {
                by_component.entry(self.expected[v]).or_default().insert(*v);
            }
        }
        let components: BTreeSet<NodeId> = self.expected.values().copied().collect();
        components.iter().all(|c| by_component.get(c).is_some_and(|s| s.len() == 1))
    }
}

#[derive(Debug, Clone, Copy)]
enum Tick {
    Broadcast,
}

/// Run the election on `topo` with every node interested in one object.
/// `crash` kills one node at the given time; the run ends once every
/// survivor has had three bully timeouts to settle.
pub fn run_election(topo: &Topology, crash: Option<(NodeId, u64)>, cfg: &ProtocolConfig) -> ElectionOutcome {
    let mut net: Network<Tick> = Network::new(LatencyModel::from_config(cfg), cfg.seed);
    let mut tables: BTreeMap<NodeId, BullyTable> = BTreeMap::new();
    for v in topo.nodes() {
        net.add_node(v, NodeRole::Client).expect("fresh ids");
        tables.insert(v, BullyTable::init(v, [OBJECT], cfg.bully_timeout));
        // Stagger first broadcasts so no two nodes act in lockstep.
        net.set_timer(v, v.0 * 7, Tick::Broadcast).expect("small queue");
    }
    let settle = 3 * cfg.bully_timeout + 2 * cfg.broadcast_time;
    let end = crash.map_or(0, |(_, at)| at) + settle;
    let mut crashed = None;

    while let Some(at) = net.peek_time() {
        if at > end {
            break;
        }
        if let Some((dead, when)) = crash {
            if crashed.is_none() && at >= when {
                net.crash(dead);
                crashed = Some(dead);
            }
        }
        let Some(ev) = net.next_event() else { break };
        let now = net.now();
        let mut out: Vec<(NodeId, NodeId, Message)> = Vec::new();
        match ev {
            Event::Timer { node, timer: Tick::Broadcast } => {
                let t = tables.get_mut(&node).expect("known");
                t.expire(now);
                for claim in t.broadcast() {
                    for p in topo.neighbours(node) {
                        out.push((node, p, Message::ImTheBully(claim)));
                    }
                }
                net.set_timer(node, now + cfg.broadcast_time, Tick::Broadcast).expect("small queue");
            }
            Event::Deliver(env) => {
                let Message::ImTheBully(claim) = env.msg else { continue };
                let me = env.dst;
                let t = tables.get_mut(&me).expect("known");
                t.expire(now);
                match t.on_claim(&claim, env.src, now) {
                    ClaimOutcome::Accepted { forward: true, .. } => {
                        for p in topo.neighbours(me) {
                            if p != env.src && p != claim.sender {
                                out.push((me, p, Message::ImTheBully(claim)));
                            }
                        }
                    }
                    ClaimOutcome::CounterClaim(c) => out.push((me, env.src, Message::ImTheBully(c))),
                    _ => {}
                }
            }
        }
        for (s, d, m) in out {
            net.send(s, d, m).expect("client links");
        }
    }

    let dead = crashed;
    let mut bullies = BTreeMap::new();
    let mut expected = BTreeMap::new();
    for v in topo.nodes().filter(|v| Some(*v) != dead) {
        let t = tables.get_mut(&v).expect("known");
        t.expire(end);
        bullies.insert(v, t.bully_of(OBJECT).expect("interested"));
        expected.insert(v, topo.lowest_reachable(v, dead));
    }
    let messages = net.stats().values().map(|s| s.sent).sum();
    ElectionOutcome { bullies, expected, messages }
}
