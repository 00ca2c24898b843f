//! Canonical binary encoding of CRDT states and deltas.
//!
//! All integers are little-endian. Layout, version 1:
//!
//! ```text
//! u8  version (= 1)
//! u8  kind    (1 = PN counter, 2 = OR map)
//!
//! PN counter:
//!   u32 n_pos, n_pos × { u64 replica, u64 count }
//!   u32 n_neg, n_neg × { u64 replica, u64 count }
//!
//! OR map:
//!   u32 n_keys, n_keys × {
//!     u32 key_len, key_len bytes UTF-8 key
//!     u32 n_dots, n_dots × { u64 replica, u64 seq, u64 timestamp, u64 writer,
//!                            u32 value_len, value_len bytes }
//!   }
//!   u32 n_vv,    n_vv    × { u64 replica, u64 max_seq }
//!   u32 n_cloud, n_cloud × { u64 replica, u64 seq }
//! ```
//!
//! Maps are written in key order, so equal values encode to equal bytes.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{CausalContext, Crdt, Dot, LwwRegister, OrMap, PnCounter};
use crate::geo::NodeId;

pub const ENCODING_VERSION: u8 = 1;
const KIND_COUNTER: u8 = 1;
const KIND_MAP: u8 = 2;

/// Size of an empty PN counter.
pub const COUNTER_HEADER_SIZE: usize = 2 + 4 + 4;
/// Size of one replica slot of a PN counter.
pub const COUNTER_ENTRY_SIZE: usize = 16;
const DOT_FIXED: usize = 8 + 8 + 8 + 8 + 4;
const PAIR: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of input at byte {0}")]
    Truncated(usize),
    #[error("unsupported encoding version {0}")]
    Version(u8),
    #[error("unknown kind tag {0}")]
    Kind(u8),
    #[error("key is not valid UTF-8")]
    Utf8,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

pub fn encoded_len(c: &Crdt) -> usize {
    match c {
        Crdt::Counter(c) => COUNTER_HEADER_SIZE + COUNTER_ENTRY_SIZE * (c.pos.len() + c.neg.len()),
        Crdt::Map(m) => {
            let mut n = 2 + 4;
            for (k, dots) in &m.entries {
                n += 4 + k.len() + 4;
                n += dots.values().map(|r| DOT_FIXED + r.value.len()).sum::<usize>();
            }
            n + 4 + PAIR * m.context.vv.len() + 4 + PAIR * m.context.cloud.len()
        }
    }
}

pub fn encode(c: &Crdt) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(c));
    out.push(ENCODING_VERSION);
    match c {
        Crdt::Counter(c) => {
            out.push(KIND_COUNTER);
            for side in [&c.pos, &c.neg] {
                put_u32(&mut out, side.len());
                for (r, v) in side {
                    out.extend_from_slice(&r.0.to_le_bytes());
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Crdt::Map(m) => {
            out.push(KIND_MAP);
            put_u32(&mut out, m.entries.len());
            for (k, dots) in &m.entries {
                put_u32(&mut out, k.len());
                out.extend_from_slice(k.as_bytes());
                put_u32(&mut out, dots.len());
                for (d, r) in dots {
                    out.extend_from_slice(&d.replica.0.to_le_bytes());
                    out.extend_from_slice(&d.seq.to_le_bytes());
                    out.extend_from_slice(&r.timestamp.to_le_bytes());
                    out.extend_from_slice(&r.writer.0.to_le_bytes());
                    put_u32(&mut out, r.value.len());
                    out.extend_from_slice(&r.value);
                }
            }
            put_u32(&mut out, m.context.vv.len());
            for (r, s) in &m.context.vv {
                out.extend_from_slice(&r.0.to_le_bytes());
                out.extend_from_slice(&s.to_le_bytes());
            }
            put_u32(&mut out, m.context.cloud.len());
            for d in &m.context.cloud {
                out.extend_from_slice(&d.replica.0.to_le_bytes());
                out.extend_from_slice(&d.seq.to_le_bytes());
            }
        }
    }
    debug_assert_eq!(out.len(), encoded_len(c));
    out
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&u32::try_from(n).expect("length exceeds u32").to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CodecError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Crdt, CodecError> {
    let mut r = Reader { buf: bytes, at: 0 };
    let version = r.u8()?;
    if version != ENCODING_VERSION {
        return Err(CodecError::Version(version));
    }
    let crdt = match r.u8()? {
        KIND_COUNTER => {
            let mut c = PnCounter::new();
            for side in [&mut c.pos, &mut c.neg] {
                let n = r.u32()?;
                for _ in 0..n {
                    let id = NodeId(r.u64()?);
                    side.insert(id, r.u64()?);
                }
            }
            Crdt::Counter(c)
        }
        KIND_MAP => {
            let mut entries = BTreeMap::new();
            for _ in 0..r.u32()? {
                let klen = r.u32()?;
                let key = std::str::from_utf8(r.take(klen)?).map_err(|_| CodecError::Utf8)?.to_owned();
                let mut dots = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let dot = Dot { replica: NodeId(r.u64()?), seq: r.u64()? };
                    let timestamp = r.u64()?;
                    let writer = NodeId(r.u64()?);
                    let vlen = r.u32()?;
                    let value = r.take(vlen)?.to_vec();
                    dots.insert(dot, LwwRegister { value, timestamp, writer });
                }
                entries.insert(key, dots);
            }
            let mut vv = BTreeMap::new();
            for _ in 0..r.u32()? {
                let id = NodeId(r.u64()?);
                vv.insert(id, r.u64()?);
            }
            let mut cloud = BTreeSet::new();
            for _ in 0..r.u32()? {
                cloud.insert(Dot { replica: NodeId(r.u64()?), seq: r.u64()? });
            }
            Crdt::Map(OrMap { entries, context: CausalContext { vv, cloud } })
        }
        other => return Err(CodecError::Kind(other)),
    };
    if r.at != bytes.len() {
        return Err(CodecError::Trailing(bytes.len() - r.at));
    }
    Ok(crdt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_counter_is_header_only() {
        let c = Crdt::Counter(PnCounter::new());
        assert_eq!(encoded_len(&c), COUNTER_HEADER_SIZE);
        assert_eq!(encode(&c), vec![1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn counter_size_grows_per_replica() {
        let mut c = PnCounter::new();
        for k in 1..=7u64 {
            c.increment(NodeId(k), k);
            assert_eq!(encode(&Crdt::Counter(c.clone())).len(), 10 + 16 * k as usize);
        }
        c.decrement(NodeId(1), 1);
        assert_eq!(encoded_len(&Crdt::Counter(c)), 10 + 16 * 8);
    }

    #[test]
    fn review_delta_overhead_budget() {
        let mut m = OrMap::new();
        let d = m.put("review/5/0", vec![b'x'; 500], NodeId(5), 1234);
        let n = encoded_len(&Crdt::Map(d));
        assert!((500..500 + 128).contains(&n), "{n}");
    }

    #[test]
    fn full_state_not_smaller_than_delta() {
        let mut m = OrMap::new();
        let mut deltas = Vec::new();
        for i in 0..5u64 {
            deltas.push(m.put(&format!("k{i}"), vec![b'a'; i as usize * 10], NodeId(i % 2 + 1), i));
        }
        let full = encoded_len(&Crdt::Map(m));
        for d in deltas {
            assert!(encoded_len(&Crdt::Map(d)) <= full);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(decode(&[]), Err(CodecError::Truncated(0)));
        assert_eq!(decode(&[2, 1]), Err(CodecError::Version(2)));
        assert_eq!(decode(&[1, 9]), Err(CodecError::Kind(9)));
        let mut ok = encode(&Crdt::Counter(PnCounter::new()));
        ok.push(0);
        assert_eq!(decode(&ok), Err(CodecError::Trailing(1)));
    }
}
