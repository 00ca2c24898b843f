//! Join-semilattice laws and delta sufficiency for both payload types,
//! over replica states grown by random operation histories.

use geoloc_core::crdt::{decode, encode};
use geoloc_core::{NodeId, OrMap, PnCounter};
use proptest::prelude::*;

const CASES: u32 = 1000;

#[derive(Debug, Clone)]
enum CounterOp {
    Inc(usize, u64),
    Dec(usize, u64),
    Sync(usize, usize),
}

#[derive(Debug, Clone)]
enum MapOp {
    Put(usize, u8, u8, u64),
    Remove(usize, u8),
    Sync(usize, usize),
}

fn counter_op() -> impl Strategy<Value = CounterOp> {
    prop_oneof![
        (0..3usize, 1..5u64).prop_map(|(r, n)| CounterOp::Inc(r, n)),
        (0..3usize, 1..5u64).prop_map(|(r, n)| CounterOp::Dec(r, n)),
        (0..3usize, 0..3usize).prop_map(|(a, b)| CounterOp::Sync(a, b)),
    ]
}

fn map_op() -> impl Strategy<Value = MapOp> {
    prop_oneof![
        3 => (0..3usize, 0..4u8, any::<u8>(), 0..20u64).prop_map(|(r, k, v, t)| MapOp::Put(r, k, v, t)),
        1 => (0..3usize, 0..4u8).prop_map(|(r, k)| MapOp::Remove(r, k)),
        2 => (0..3usize, 0..3usize).prop_map(|(a, b)| MapOp::Sync(a, b)),
    ]
}

fn rid(i: usize) -> NodeId {
    NodeId(i as u64 + 1)
}

fn counters(ops: &[CounterOp]) -> [PnCounter; 3] {
    let mut s: [PnCounter; 3] = Default::default();
    for op in ops {
        match *op {
            CounterOp::Inc(r, n) => {
                s[r].increment(rid(r), n);
            }
            CounterOp::Dec(r, n) => {
                s[r].decrement(rid(r), n);
            }
            CounterOp::Sync(a, b) => {
                let src = s[a].clone();
                s[b].merge(&src);
            }
        }
    }
    s
}

fn maps(ops: &[MapOp]) -> [OrMap; 3] {
    let mut s: [OrMap; 3] = Default::default();
    for op in ops {
        match *op {
            MapOp::Put(r, k, v, t) => {
                s[r].put(&format!("k{k}"), vec![v], rid(r), t);
            }
            MapOp::Remove(r, k) => {
                s[r].remove(&format!("k{k}"));
            }
            MapOp::Sync(a, b) => {
                let src = s[a].clone();
                s[b].merge(&src);
            }
        }
    }
    s
}

fn join<T: Clone>(a: &T, b: &T, merge: fn(&mut T, &T) -> bool) -> T {
    let mut x = a.clone();
    merge(&mut x, b);
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn counter_laws(ops in prop::collection::vec(counter_op(), 0..40)) {
        let [a, b, c] = counters(&ops);
        let m = PnCounter::merge;
        prop_assert_eq!(join(&a, &a, m), a.clone());
        prop_assert_eq!(join(&a, &b, m), join(&b, &a, m));
        prop_assert_eq!(join(&join(&a, &b, m), &c, m), join(&a, &join(&b, &c, m), m));
        let ab = join(&a, &b, m);
        prop_assert!(ab.includes(&a) && ab.includes(&b));
    }

    #[test]
    fn counter_delta_sufficiency(ops in prop::collection::vec(counter_op(), 0..40), r in 0..3usize, n in 1..5u64, other in 0..3usize) {
        let states = counters(&ops);
        let mut full = states[r].clone();
        let delta = full.increment(rid(r), n);
        let mut via_delta = states[r].clone();
        via_delta.merge(&delta);
        prop_assert_eq!(&via_delta, &full);
        // A replica that already saw the pre-state reaches the same join.
        let mut remote = states[other].clone();
        remote.merge(&states[r]);
        remote.merge(&delta);
        prop_assert_eq!(remote, join(&states[other], &full, PnCounter::merge));
    }

    #[test]
    fn map_laws(ops in prop::collection::vec(map_op(), 0..40)) {
        let [a, b, c] = maps(&ops);
        let m = OrMap::merge;
        prop_assert_eq!(join(&a, &a, m), a.clone());
        prop_assert_eq!(join(&a, &b, m), join(&b, &a, m));
        prop_assert_eq!(join(&join(&a, &b, m), &c, m), join(&a, &join(&b, &c, m), m));
        let ab = join(&a, &b, m);
        prop_assert!(ab.includes(&a) && ab.includes(&b));
    }

    #[test]
    fn map_delta_sufficiency(
        ops in prop::collection::vec(map_op(), 0..40),
        r in 0..3usize,
        k in 0..4u8,
        v in any::<u8>(),
        t in 0..20u64,
        remove in any::<bool>(),
        other in 0..3usize,
    ) {
        let states = maps(&ops);
        let mut full = states[r].clone();
        let key = format!("k{k}");
        let delta = if remove { full.remove(&key) } else { full.put(&key, vec![v], rid(r), t) };
        let mut via_delta = states[r].clone();
        via_delta.merge(&delta);
        prop_assert_eq!(&via_delta, &full);
        let mut remote = states[other].clone();
        remote.merge(&states[r]);
        remote.merge(&delta);
        prop_assert_eq!(remote, join(&states[other], &full, OrMap::merge));
    }

    #[test]
    fn codec_round_trips(cops in prop::collection::vec(counter_op(), 0..30), mops in prop::collection::vec(map_op(), 0..30)) {
        for c in counters(&cops) {
            let c = geoloc_core::Crdt::Counter(c);
            prop_assert_eq!(decode(&encode(&c)).unwrap(), c);
        }
        for m in maps(&mops) {
            let m = geoloc_core::Crdt::Map(m);
            prop_assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }
}
