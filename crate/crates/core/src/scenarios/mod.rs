//! The check-in, review and latency experiments over the three overlay
//! models, plus metric export and cross-run comparison.

mod election;
mod export;
mod world;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ProtocolConfig};
use crate::crdt::Crdt;
use crate::geo::{GeoPosition, NodeId, ObjectId};
use crate::simnet::{Channel, ChannelStats, SimError};
use crate::traces::{ObjectPlacement, PlacementKind, Route, TraceError, Traces};
use crate::wire::WriteId;

pub use election::{connected_topologies, run_election, ElectionOutcome, Topology};
pub use export::{compare, export, read_summary, summarize_runs, Comparison, ComparisonRow, ExportError, LatencySummary, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlayMode {
    GloPartial,
    GloFull,
    #[serde(rename = "cs")]
    ClientServer,
}

impl OverlayMode {
    pub const ALL: [OverlayMode; 3] = [OverlayMode::GloPartial, OverlayMode::GloFull, OverlayMode::ClientServer];

    pub fn name(self) -> &'static str {
        match self {
            OverlayMode::GloPartial => "glo-partial",
            OverlayMode::GloFull => "glo-full",
            OverlayMode::ClientServer => "cs",
        }
    }

    pub fn uses_overlay(self) -> bool {
        self != OverlayMode::ClientServer
    }
}

impl fmt::Display for OverlayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OverlayMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "glo-partial" => Ok(OverlayMode::GloPartial),
            "glo-full" => Ok(OverlayMode::GloFull),
            "cs" | "client-server" => Ok(OverlayMode::ClientServer),
            _ => Err(format!("unknown mode `{s}` (expected glo-partial, glo-full or cs)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Checkin,
    Review,
    Latency,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Checkin => "checkin",
            ScenarioKind::Review => "review",
            ScenarioKind::Latency => "latency",
        }
    }

    /// Payload kind every object gets in this scenario.
    pub fn object_kind(self) -> PlacementKind {
        match self {
            ScenarioKind::Checkin => PlacementKind::Counter,
            ScenarioKind::Review | ScenarioKind::Latency => PlacementKind::Map,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "checkin" => Ok(ScenarioKind::Checkin),
            "review" => Ok(ScenarioKind::Review),
            "latency" => Ok(ScenarioKind::Latency),
            _ => Err(format!("unknown scenario `{s}` (expected checkin, review or latency)")),
        }
    }
}

/// Knobs beyond the protocol config.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub scenario: ScenarioKind,
    pub mode: OverlayMode,
    pub config: ProtocolConfig,
    /// Edge grid over the traces' bounding box; `(0, 0)` means no edges.
    pub edge_grid: (usize, usize),
    /// Clients idle at their first waypoint this long before moving.
    pub warmup_ms: u64,
    pub latency_writes: usize,
    pub latency_interval_ms: u64,
    /// Window during which the signalling server is unreachable.
    pub signalling_outage: Option<(u64, u64)>,
    pub loss: f64,
    pub jitter: f64,
    pub backlog_cap: usize,
    /// Give up if quiescence is not reached this long after the last
    /// scheduled movement or write.
    pub max_overrun_ms: u64,
}

impl RunOptions {
    pub fn new(scenario: ScenarioKind, mode: OverlayMode, config: ProtocolConfig) -> Self {
        Self {
            scenario,
            mode,
            config,
            edge_grid: if scenario == ScenarioKind::Latency { (0, 0) } else { (2, 2) },
            warmup_ms: 3000,
            latency_writes: 10,
            latency_interval_ms: 10_000,
            signalling_outage: None,
            loss: 0.0,
            jitter: 0.0,
            backlog_cap: crate::simnet::DEFAULT_BACKLOG_CAP,
            max_overrun_ms: 600_000,
        }
    }

    /// Quiet period that ends a run.
    pub fn grace_ms(&self) -> u64 {
        5 * self.config.broadcast_time
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    /// The scenario inputs cannot be simulated as given.
    #[error("{0}")]
    Setup(String),
    /// A node hit a state its protocol should never reach.
    #[error("protocol fault: {0}")]
    Protocol(String),
}

/// One write observed at a replica other than its origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatencySample {
    pub origin: NodeId,
    pub seq: u64,
    pub receiver: NodeId,
    pub issued_at: u64,
    pub received_at: u64,
}

impl LatencySample {
    pub fn latency(&self) -> u64 {
        self.received_at - self.issued_at
    }
}

/// Overlay invariants observed during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlayReport {
    pub reviews: u64,
    pub max_degree: usize,
    pub degree_violations: u64,
    pub floods: u64,
    pub max_flood_transmissions: u64,
    /// Floods that used more transmissions than the overlay had links
    /// when they started.
    pub flood_violations: u64,
    pub links_at_end: usize,
    /// Longest end-of-run link by true positions.
    pub max_link_span_m: f64,
    pub locality_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub channels: BTreeMap<Channel, ChannelStats>,
    /// Client↔edge plus client↔cloud messages.
    pub server_messages: u64,
    pub server_bytes: u64,
    pub peer_messages: u64,
    pub peer_bytes: u64,
    pub upstream_messages: u64,
    pub upstream_bytes: u64,
    pub total_messages: u64,
    pub total_bytes: u64,
    pub data_messages: u64,
    pub control_messages: u64,
    pub heartbeat_messages: u64,
    pub writes_issued: u64,
    /// Payload bytes that reached a node not replicating the object.
    pub wasted_bytes: u64,
    pub latencies: Vec<LatencySample>,
    pub end_time_ms: u64,
    pub events: u64,
    pub quiesced: bool,
    pub overlay: OverlayReport,
    /// Issued deltas not contained in the cloud store at the end.
    pub missing_deltas: u64,
}

impl Metrics {
    pub(crate) fn from_channels(channels: BTreeMap<Channel, ChannelStats>) -> Self {
        let sum = |f: &dyn Fn(&Channel) -> bool, g: &dyn Fn(&ChannelStats) -> u64| -> u64 {
            channels.iter().filter(|(c, _)| f(c)).map(|(_, s)| g(s)).sum()
        };
        let all = |_: &Channel| true;
        Metrics {
            server_messages: sum(&|c| c.is_server(), &|s| s.sent),
            server_bytes: sum(&|c| c.is_server(), &|s| s.bytes),
            peer_messages: sum(&|c| *c == Channel::Peer, &|s| s.sent),
            peer_bytes: sum(&|c| *c == Channel::Peer, &|s| s.bytes),
            upstream_messages: sum(&|c| *c == Channel::EdgeCloud, &|s| s.sent),
            upstream_bytes: sum(&|c| *c == Channel::EdgeCloud, &|s| s.bytes),
            total_messages: sum(&all, &|s| s.sent),
            total_bytes: sum(&all, &|s| s.bytes),
            data_messages: sum(&all, &|s| s.data_messages),
            control_messages: sum(&all, &|s| s.control_messages()),
            heartbeat_messages: sum(&all, &|s| s.heartbeat_messages),
            channels,
            writes_issued: 0,
            wasted_bytes: 0,
            latencies: Vec::new(),
            end_time_ms: 0,
            events: 0,
            quiesced: false,
            overlay: OverlayReport::default(),
            missing_deltas: 0,
        }
    }

    pub fn latency_values(&self) -> Vec<u64> {
        self.latencies.iter().map(|s| s.latency()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario: ScenarioKind,
    pub mode: OverlayMode,
    pub seed: u64,
    /// SHA-256 over the config, options and traces that define the run.
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct IssuedWrite {
    pub object: ObjectId,
    pub write: WriteId,
    pub delta: Crdt,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub meta: RunMeta,
    pub metrics: Metrics,
    /// Final cloud state of every object.
    pub cloud: BTreeMap<ObjectId, Crdt>,
    pub issued: Vec<IssuedWrite>,
}

/// Stationary co-located clients and one shared map for the latency
/// experiment.
pub fn latency_traces(clients: usize, center: GeoPosition) -> Traces {
    let routes = (0..clients)
        .map(|i| {
            let at = center.offset(360.0 * i as f64 / clients.max(1) as f64, 30.0);
            Route::uniform(NodeId(i as u64 + 1), vec![at, at], crate::traces::DEFAULT_DWELL_MS)
        })
        .collect();
    let objects = vec![ObjectPlacement { object: ObjectId(1), pos: center, kind: PlacementKind::Map }];
    Traces { routes, objects }
}

pub fn default_latency_center() -> GeoPosition {
    GeoPosition::new(41.1579, -8.6291).expect("valid constant")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn config_hash(opts: &RunOptions, traces: &Traces) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&opts.config).expect("config serializes"));
    h.update(
        format!(
            "{}|{}|{:?}|{}|{}|{}|{:?}|{}|{}",
            opts.scenario,
            opts.mode,
            opts.edge_grid,
            opts.warmup_ms,
            opts.latency_writes,
            opts.latency_interval_ms,
            opts.signalling_outage,
            opts.loss,
            opts.jitter
        )
        .as_bytes(),
    );
    for r in &traces.routes {
        h.update(r.client.0.to_le_bytes());
        for (p, d) in r.waypoints.iter().zip(&r.dwell) {
            h.update(p.lat().to_le_bytes());
            h.update(p.lon().to_le_bytes());
            h.update(d.to_le_bytes());
        }
    }
    for o in &traces.objects {
        h.update(o.object.0.to_le_bytes());
        h.update(o.pos.lat().to_le_bytes());
        h.update(o.pos.lon().to_le_bytes());
    }
    hex(&h.finalize())
}

/// Run one scenario to quiescence.
pub fn run(opts: &RunOptions, traces: &Traces) -> Result<RunOutcome, ScenarioError> {
    opts.config.validate()?;
    traces.validate()?;
    world::World::new(opts, traces)?.run()
}

pub fn run_checkin(mode: OverlayMode, traces: &Traces, config: &ProtocolConfig) -> Result<RunOutcome, ScenarioError> {
    run(&RunOptions::new(ScenarioKind::Checkin, mode, config.clone()), traces)
}

pub fn run_review(mode: OverlayMode, traces: &Traces, config: &ProtocolConfig) -> Result<RunOutcome, ScenarioError> {
    run(&RunOptions::new(ScenarioKind::Review, mode, config.clone()), traces)
}

/// Latency experiment over five co-located stationary clients.
pub fn run_latency(mode: OverlayMode, config: &ProtocolConfig) -> Result<RunOutcome, ScenarioError> {
    let traces = latency_traces(5, default_latency_center());
    run(&RunOptions::new(ScenarioKind::Latency, mode, config.clone()), &traces)
}

/// Median of a sample, lower middle for even counts.
pub fn median(values: &[u64]) -> Option<u64> {
    percentile(values, 50.0)
}

/// Nearest-rank percentile.
pub fn percentile(values: &[u64], p: f64) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_by_nearest_rank() {
        let v = [15, 20, 35, 40, 50];
        assert_eq!(percentile(&v, 30.0), Some(20));
        assert_eq!(percentile(&v, 100.0), Some(50));
        assert_eq!(median(&v), Some(35));
        assert_eq!(median(&[1, 2, 3, 4]), Some(2));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in OverlayMode::ALL {
            assert_eq!(m.name().parse::<OverlayMode>().unwrap(), m);
        }
        assert!("p2p".parse::<OverlayMode>().is_err());
    }
}
