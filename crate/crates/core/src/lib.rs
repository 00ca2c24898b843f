//! GeoLoc: proximity-based overlay, per-object bully election and
//! location-scoped partial replication of delta-CRDT objects across a
//! client / edge / cloud hierarchy, driven by a deterministic
//! discrete-event simulator.

pub mod config;
pub mod crdt;
pub mod geo;
pub mod bully;
pub mod overlay;
pub mod replication;
pub mod scenarios;
pub mod simnet;
pub mod traces;
pub mod wire;

pub use config::{ConfigError, ProtocolConfig};
pub use crdt::{Crdt, CrdtKind, Delta, LwwRegister, OrMap, PnCounter, ReplicaId};
pub use geo::{distance, within, BoundingBox, GeoError, GeoPosition, NodeId, ObjectId};
pub use scenarios::{run, OverlayMode, RunOptions, RunOutcome, ScenarioKind};
pub use traces::{synthesize, SynthParams, Traces};
