//! Simulated wire messages and their canonical sizes.
//!
//! Sizes are what the byte metrics count. Every message starts with a
//! 12-byte envelope (`u8` type tag, `u8` version, `u16` flags, `u64`
//! sender id). Fields then follow at fixed widths: ids and times 8 bytes,
//! positions 16 (two `f64`), booleans and kinds 1, list lengths 4.
//!
//! | message      | size                                                   |
//! |--------------|--------------------------------------------------------|
//! | JoinOrPos    | 12 + 8 + 16                                            |
//! | PeerList     | 12 + 4 + 24·peers + 4 + 33·directory entries           |
//! | Redirect     | 12 + 8                                                 |
//! | Position     | 12 + 8 + 16 + 1 + 8 + 4 + 8·visited + 4 + 8·notified    |
//! | Dial         | 12 + 8 + 16                                            |
//! | DialAck      | 12 + 1                                                 |
//! | Hangup       | 12                                                     |
//! | Interest     | 12 + 4 + 8·objects                                     |
//! | ImTheBully   | 12 + 8 + 8 + 8                                         |
//! | FetchReq     | 12 + 8                                                 |
//! | FetchReply   | 12 + 8 + 16 + 1 + payload                              |
//! | FetchNack    | 12 + 8                                                 |
//! | Delta        | 12 + 8 + 16 + 8 + 1 + 1 + 4 + 8·seen + payload          |
//! | Ack          | 12 + 8 + 16                                            |
//! | Subscribe    | 12 + 8                                                 |
//! | Unsubscribe  | 12 + 8                                                 |
//!
//! `payload` is the canonical CRDT encoding (see [`crate::crdt`]).

use std::collections::BTreeSet;

use serde::Serialize;

use crate::bully::BullyClaim;
use crate::crdt::{CrdtKind, Delta};
use crate::geo::{GeoPosition, NodeId, ObjectId};
use crate::overlay::PositionMessage;
use crate::replication::GeoObject;

pub const ENVELOPE: usize = 12;
const ID: usize = 8;
const POS: usize = 16;
const LEN: usize = 4;
const PEER_INFO: usize = ID + POS;
const DIRECTORY_ENTRY: usize = ID + POS + 1 + ID;
const WRITE_ID: usize = 16;

/// Identity of one client write: the `seq`-th write issued by `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct WriteId {
    pub origin: NodeId,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeerInfo {
    pub id: NodeId,
    pub pos: GeoPosition,
}

/// One object known to the signalling server: where it is and which
/// object server is responsible for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectoryEntry {
    pub object: ObjectId,
    pub pos: GeoPosition,
    pub kind: CrdtKind,
    pub server: NodeId,
}

/// A CRDT delta in flight.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMsg {
    pub object: ObjectId,
    pub delta: Delta,
    pub write: WriteId,
    /// Simulated time at which the origin applied the write.
    pub issued_at: u64,
    /// Nodes already sent this write; forwarding skips them.
    pub seen: BTreeSet<NodeId>,
    /// Set on the copy addressed to the next hop towards the object's bully;
    /// that node must pass it on towards the server.
    pub relay: bool,
    pub hops: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    JoinOrPos { node: NodeId, pos: GeoPosition },
    PeerList { peers: Vec<PeerInfo>, directory: Vec<DirectoryEntry> },
    Redirect { server: NodeId },
    Position(PositionMessage),
    Dial { node: NodeId, pos: GeoPosition },
    DialAck { accept: bool },
    Hangup,
    Interest { objects: Vec<ObjectId> },
    ImTheBully(BullyClaim),
    FetchReq { object: ObjectId },
    FetchReply { object: GeoObject },
    FetchNack { object: ObjectId },
    Delta(DeltaMsg),
    Ack { object: ObjectId, write: WriteId },
    Subscribe { object: ObjectId },
    Unsubscribe { object: ObjectId },
}

impl Message {
    pub fn wire_size(&self) -> usize {
        ENVELOPE
            + match self {
                Message::JoinOrPos { .. } => ID + POS,
                Message::PeerList { peers, directory } => {
                    LEN + PEER_INFO * peers.len() + LEN + DIRECTORY_ENTRY * directory.len()
                }
                Message::Redirect { .. } => ID,
                Message::Position(p) => {
                    ID + POS + 1 + ID + LEN + ID * p.visited_peers.len() + LEN + ID * p.notified.len()
                }
                Message::Dial { .. } => ID + POS,
                Message::DialAck { .. } => 1,
                Message::Hangup => 0,
                Message::Interest { objects } => LEN + ID * objects.len(),
                Message::ImTheBully(_) => 3 * ID,
                Message::FetchReq { .. } | Message::FetchNack { .. } => ID,
                Message::FetchReply { object } => ID + POS + 1 + object.payload.serialized_size(),
                Message::Delta(d) => {
                    ID + WRITE_ID + ID + 1 + 1 + LEN + ID * d.seen.len() + d.delta.serialized_size()
                }
                Message::Ack { .. } => ID + WRITE_ID,
                Message::Subscribe { .. } | Message::Unsubscribe { .. } => ID,
            }
    }

    /// Messages that carry CRDT state; everything else is control traffic.
    pub fn is_data(&self) -> bool {
        matches!(self, Message::FetchReply { .. } | Message::Delta(_))
    }

    /// Periodic liveness traffic that a quiescent system keeps emitting.
    pub fn is_heartbeat(&self) -> bool {
        matches!(self, Message::ImTheBully(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::JoinOrPos { .. } => "join_or_pos",
            Message::PeerList { .. } => "peer_list",
            Message::Redirect { .. } => "redirect",
            Message::Position(_) => "position",
            Message::Dial { .. } => "dial",
            Message::DialAck { .. } => "dial_ack",
            Message::Hangup => "hangup",
            Message::Interest { .. } => "interest",
            Message::ImTheBully(_) => "im_the_bully",
            Message::FetchReq { .. } => "fetch_req",
            Message::FetchReply { .. } => "fetch_reply",
            Message::FetchNack { .. } => "fetch_nack",
            Message::Delta(_) => "delta",
            Message::Ack { .. } => "ack",
            Message::Subscribe { .. } => "subscribe",
            Message::Unsubscribe { .. } => "unsubscribe",
        }
    }
}

/// A message addressed to one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: NodeId,
    pub msg: Message,
}

impl Outbound {
    pub fn new(to: NodeId, msg: Message) -> Self {
        Self { to, msg }
    }
}
