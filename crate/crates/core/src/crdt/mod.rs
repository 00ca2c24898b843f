//! Delta-state CRDTs carried as object payloads.
//!
//! Every mutation returns a delta of the same shape as the full state;
//! merging the delta into the pre-mutation state yields the post-mutation
//! state. Merge is a join: idempotent, commutative and associative.

mod codec;
mod counter;
mod ormap;
mod register;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geo::NodeId;

pub use codec::{decode, encode, encoded_len, CodecError, COUNTER_ENTRY_SIZE, COUNTER_HEADER_SIZE, ENCODING_VERSION};
pub use counter::PnCounter;
pub use ormap::{CausalContext, Dot, OrMap};
pub use register::LwwRegister;

/// Replica identity of a CRDT copy; equal to the id of the node holding it.
pub type ReplicaId = NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrdtKind {
    Counter,
    Map,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CrdtError {
    #[error("cannot merge {incoming:?} into {local:?}")]
    KindMismatch { local: CrdtKind, incoming: CrdtKind },
}

/// Object payload: full state or delta.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Crdt {
    Counter(PnCounter),
    Map(OrMap),
}

/// A delta has the same shape as a state.
pub type Delta = Crdt;

impl Crdt {
    pub fn empty(kind: CrdtKind) -> Self {
        match kind {
            CrdtKind::Counter => Crdt::Counter(PnCounter::new()),
            CrdtKind::Map => Crdt::Map(OrMap::new()),
        }
    }

    pub fn kind(&self) -> CrdtKind {
        match self {
            Crdt::Counter(_) => CrdtKind::Counter,
            Crdt::Map(_) => CrdtKind::Map,
        }
    }

    /// Join `other` into `self`; returns whether `self` changed.
    pub fn merge(&mut self, other: &Crdt) -> Result<bool, CrdtError> {
        match (self, other) {
            (Crdt::Counter(a), Crdt::Counter(b)) => Ok(a.merge(b)),
            (Crdt::Map(a), Crdt::Map(b)) => Ok(a.merge(b)),
            (a, b) => Err(CrdtError::KindMismatch { local: a.kind(), incoming: b.kind() }),
        }
    }

    /// Whether `other` is already contained in `self`.
    pub fn includes(&self, other: &Crdt) -> bool {
        match (self, other) {
            (Crdt::Counter(a), Crdt::Counter(b)) => a.includes(b),
            (Crdt::Map(a), Crdt::Map(b)) => a.includes(b),
            _ => false,
        }
    }

    pub fn as_counter(&self) -> Option<&PnCounter> {
        match self {
            Crdt::Counter(c) => Some(c),
            Crdt::Map(_) => None,
        }
    }

    pub fn as_map(&self) -> Option<&OrMap> {
        match self {
            Crdt::Map(m) => Some(m),
            Crdt::Counter(_) => None,
        }
    }

    /// Bytes of the canonical wire encoding.
    pub fn serialized_size(&self) -> usize {
        encoded_len(self)
    }

    /// Human-readable JSON rendering for golden files and debugging.
    pub fn debug_json(&self) -> Value {
        match self {
            Crdt::Counter(c) => json!({
                "kind": "counter",
                "value": c.value(),
                "pos": c.pos.iter().map(|(r, v)| (r.0.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
                "neg": c.neg.iter().map(|(r, v)| (r.0.to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
            }),
            Crdt::Map(m) => {
                let entries: serde_json::Map<String, Value> = m
                    .entries
                    .iter()
                    .map(|(k, dots)| {
                        let ds: Vec<Value> = dots
                            .iter()
                            .map(|(d, r)| {
                                json!({
                                    "dot": [d.replica.0, d.seq],
                                    "ts": r.timestamp,
                                    "writer": r.writer.0,
                                    "value": String::from_utf8_lossy(&r.value),
                                })
                            })
                            .collect();
                        (k.clone(), Value::Array(ds))
                    })
                    .collect();
                json!({
                    "kind": "map",
                    "entries": entries,
                    "context": {
                        "vv": m.context.vv.iter().map(|(r, s)| json!([r.0, s])).collect::<Vec<_>>(),
                        "cloud": m.context.cloud.iter().map(|d| json!([d.replica.0, d.seq])).collect::<Vec<_>>(),
                    }
                })
            }
        }
    }
}

impl From<PnCounter> for Crdt {
    fn from(c: PnCounter) -> Self {
        Crdt::Counter(c)
    }
}

impl From<OrMap> for Crdt {
    fn from(m: OrMap) -> Self {
        Crdt::Map(m)
    }
}
