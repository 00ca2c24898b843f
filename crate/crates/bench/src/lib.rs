//! Fixtures shared by the protocol benchmarks.

use geoloc_core::{synthesize, NodeId, OrMap, PnCounter, SynthParams, Traces};

/// Map with `keys` entries written round-robin by `replicas` writers.
pub fn filled_map(keys: usize, replicas: u64) -> OrMap {
    let mut m = OrMap::new();
    for i in 0..keys {
        let r = NodeId(i as u64 % replicas + 1);
        m.put(&format!("key/{i}"), vec![b'x'; 64], r, i as u64);
    }
    m
}

pub fn filled_counter(replicas: u64) -> PnCounter {
    let mut c = PnCounter::new();
    for r in 1..=replicas {
        c.increment(NodeId(r), r);
    }
    c
}

pub fn default_traces() -> Traces {
    synthesize(&SynthParams::default()).expect("default synth is feasible")
}
