//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails
//! if any criterion failed.

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use geoloc_core::crdt::{Crdt, OrMap, PnCounter};
use geoloc_core::scenarios::{
    connected_topologies, export, median, run_election, run_latency, OverlayMode, RunOptions, ScenarioKind,
};
use geoloc_core::traces::{synthesize, SynthParams};
use geoloc_core::{run, NodeId, ProtocolConfig, RunOutcome, Traces};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const RUNTIME_LIMIT: Duration = Duration::from_secs(60);

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(n: u32, v: &Verdict) {
    println!("criterion {n}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
}

fn default_traces(seed: u64) -> Traces {
    synthesize(&SynthParams { seed, ..SynthParams::default() }).expect("default synth is feasible")
}

fn config(seed: u64) -> ProtocolConfig {
    ProtocolConfig { seed, ..ProtocolConfig::default() }
}

fn timed(opts: &RunOptions, traces: &Traces) -> (RunOutcome, Duration) {
    let t = Instant::now();
    let out = run(opts, traces).expect("run completes");
    (out, t.elapsed())
}

fn three_modes(kind: ScenarioKind, cfg: &ProtocolConfig, traces: &Traces) -> (BTreeMap<OverlayMode, RunOutcome>, Duration) {
    let mut slowest = Duration::ZERO;
    let runs = OverlayMode::ALL
        .into_iter()
        .map(|m| {
            let (out, took) = timed(&RunOptions::new(kind, m, cfg.clone()), traces);
            slowest = slowest.max(took);
            (m, out)
        })
        .collect();
    (runs, slowest)
}

fn criterion_1() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let (r, slowest) = three_modes(ScenarioKind::Checkin, &config(seed), &default_traces(seed));
        let (p, f, c) = (&r[&OverlayMode::GloPartial].metrics, &r[&OverlayMode::GloFull].metrics, &r[&OverlayMode::ClientServer].metrics);
        let ok = p.total_messages < f.total_messages && c.server_messages <= p.server_messages && slowest <= RUNTIME_LIMIT;
        pass &= ok;
        parts.push(format!(
            "seed{seed}: total partial={} full={}; server cs={} partial={}; slowest={:.0?}",
            p.total_messages, f.total_messages, c.server_messages, p.server_messages, slowest
        ));
    }
    Verdict { pass, detail: parts.join(" | ") }
}

fn criterion_2() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let cfg = ProtocolConfig { review_probability: 1.0, ..config(seed) };
        let (r, _) = three_modes(ScenarioKind::Review, &cfg, &default_traces(seed));
        let (p, f) = (&r[&OverlayMode::GloPartial].metrics, &r[&OverlayMode::GloFull].metrics);
        pass &= p.total_bytes < f.total_bytes;
        let count = |m: &geoloc_core::scenarios::Metrics| m.peer_messages + m.server_messages;
        parts.push(format!(
            "seed{seed}: bytes partial={} full={}; peer+server partial={} full={} (partial higher: {})",
            p.total_bytes,
            f.total_bytes,
            count(p),
            count(f),
            count(p) > count(f)
        ));
    }
    Verdict { pass, detail: parts.join(" | ") }
}

fn criterion_3() -> Verdict {
    let cfg = ProtocolConfig::default();
    let cs = run_latency(OverlayMode::ClientServer, &cfg).expect("latency run").metrics;
    let glo = run_latency(OverlayMode::GloPartial, &cfg).expect("latency run").metrics;
    let (cs_v, glo_v) = (cs.latency_values(), glo.latency_values());
    let cs_exact = !cs_v.is_empty() && cs_v.iter().all(|&l| l == 2 * cfg.latency_high);
    // Co-located cluster of five with max_peers five: every pair is a
    // direct link, so every GLO sample is one peer hop.
    let glo_exact = !glo_v.is_empty() && glo_v.iter().all(|&l| l == cfg.latency_low);
    let (gm, cm) = (median(&glo_v), median(&cs_v));
    let pass = cs_exact && glo_exact && gm < cm && gm.is_some();
    Verdict {
        pass,
        detail: format!(
            "median glo={gm:?} cs={cm:?}; cs samples={} all {}ms: {cs_exact}; glo samples={} all {}ms: {glo_exact}",
            cs_v.len(),
            2 * cfg.latency_high,
            glo_v.len(),
            cfg.latency_low
        ),
    }
}

fn criterion_4() -> Verdict {
    let cfg = ProtocolConfig::default();
    let topologies = connected_topologies(4);
    let mut schedules = 0;
    let mut failures = Vec::new();
    for t in &topologies {
        let mut crashes = vec![None];
        for v in t.nodes() {
            // Before the first claims land, mid-convergence, and after.
            for at in [1, 2 * cfg.broadcast_time + 30, 20_000] {
                crashes.push(Some((v, at)));
            }
        }
        for crash in crashes {
            schedules += 1;
            let r = run_election(t, crash, &cfg);
            if !(r.correct() && r.unique_per_component()) {
                failures.push(format!("{:?} crash {:?}: {:?}", t.edges, crash, r.bullies));
            }
        }
    }
    Verdict {
        pass: failures.is_empty(),
        detail: format!(
            "{} topologies, {schedules} schedules, {} failures{}",
            topologies.len(),
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    }
}

fn random_traces(rng: &mut ChaCha8Rng) -> Traces {
    loop {
        let p = SynthParams {
            seed: rng.gen(),
            clients: rng.gen_range(1..=6),
            waypoints: rng.gen_range(8..=30),
            objects: rng.gen_range(6..=30),
            ..SynthParams::default()
        };
        if let Ok(t) = synthesize(&p) {
            return t;
        }
    }
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut missing = 0;
    let mut unquiesced = 0;
    let mut writes = 0;
    for i in 0..100u64 {
        let traces = random_traces(&mut rng);
        let kind = if rng.gen_bool(0.5) { ScenarioKind::Checkin } else { ScenarioKind::Review };
        let cfg = ProtocolConfig { seed: i, review_probability: rng.gen_range(0.3..=1.0), ..ProtocolConfig::default() };
        let out = run(&RunOptions::new(kind, OverlayMode::GloPartial, cfg), &traces).expect("run completes");
        missing += out.metrics.missing_deltas;
        unquiesced += u64::from(!out.metrics.quiesced);
        writes += out.metrics.writes_issued;
    }

    let mut mismatched = Vec::new();
    for seed in SEEDS {
        for kind in [ScenarioKind::Checkin, ScenarioKind::Review] {
            let cfg = ProtocolConfig { review_probability: 1.0, ..config(seed) };
            let (r, _) = three_modes(kind, &cfg, &default_traces(seed));
            let base = &r[&OverlayMode::ClientServer].cloud;
            for (m, out) in &r {
                if &out.cloud != base {
                    mismatched.push(format!("{kind}/seed{seed}/{m}"));
                }
            }
        }
    }
    Verdict {
        pass: missing == 0 && unquiesced == 0 && mismatched.is_empty(),
        detail: format!(
            "100 runs, {writes} writes, {missing} missing, {unquiesced} not quiesced; cross-mode mismatches: {mismatched:?}"
        ),
    }
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    let n = 1000;
    for _ in 0..n {
        let mut cs: [PnCounter; 3] = Default::default();
        let mut ms: [OrMap; 3] = Default::default();
        let mut delta_ok = true;
        for _ in 0..rng.gen_range(0..30) {
            let r = rng.gen_range(0..3usize);
            let id = NodeId(r as u64 + 1);
            match rng.gen_range(0..5) {
                0 => {
                    let before = cs[r].clone();
                    let d = cs[r].increment(id, rng.gen_range(1..4));
                    let mut x = before;
                    x.merge(&d);
                    delta_ok &= x == cs[r];
                }
                1 => {
                    let before = ms[r].clone();
                    let d = ms[r].put(&format!("k{}", rng.gen_range(0..4)), vec![rng.gen()], id, rng.gen_range(0..10));
                    let mut x = before;
                    x.merge(&d);
                    delta_ok &= x == ms[r];
                }
                2 => {
                    let before = ms[r].clone();
                    let d = ms[r].remove(&format!("k{}", rng.gen_range(0..4)));
                    let mut x = before;
                    x.merge(&d);
                    delta_ok &= x == ms[r];
                }
                _ => {
                    let s = rng.gen_range(0..3usize);
                    let (c, m) = (cs[s].clone(), ms[s].clone());
                    cs[r].merge(&c);
                    ms[r].merge(&m);
                }
            }
        }
        let laws = |v: [Crdt; 3]| {
            let j = |a: &Crdt, b: &Crdt| {
                let mut x = a.clone();
                x.merge(b).expect("same kind");
                x
            };
            let [a, b, c] = v;
            j(&a, &a) == a && j(&a, &b) == j(&b, &a) && j(&j(&a, &b), &c) == j(&a, &j(&b, &c))
        };
        let ok = delta_ok && laws(cs.map(Crdt::Counter)) && laws(ms.map(Crdt::Map));
        bad += u32::from(!ok);
    }
    Verdict { pass: bad == 0, detail: format!("{n} instances per type, {bad} violations") }
}

fn criterion_7() -> Verdict {
    // Position floods only happen while the signalling server is
    // unreachable, so besides the plain runs sweep outages that begin
    // around the hub crossing, when the overlay is densest.
    let mut windows = vec![None];
    windows.extend((20..=30).map(|s| Some((s * 1000, 60_000))));
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let traces = default_traces(seed);
        let (mut reviews, mut max_degree, mut floods, mut max_tx, mut links, mut span) = (0, 0, 0, 0, 0, 0.0f64);
        let mut violations = [0u64; 3];
        for &outage in &windows {
            let mut opts = RunOptions::new(ScenarioKind::Checkin, OverlayMode::GloPartial, config(seed));
            opts.signalling_outage = outage;
            let o = run(&opts, &traces).expect("run completes").metrics.overlay;
            reviews += o.reviews;
            max_degree = max_degree.max(o.max_degree);
            floods += o.floods;
            max_tx = max_tx.max(o.max_flood_transmissions);
            links += o.links_at_end;
            span = span.max(o.max_link_span_m);
            violations[0] += o.degree_violations;
            violations[1] += o.locality_violations;
            violations[2] += o.flood_violations;
        }
        pass &= violations == [0, 0, 0];
        parts.push(format!(
            "seed{seed}: {} runs, reviews={reviews} max_degree={max_degree} end_links={links} max_span={span:.0}m floods={floods} max_tx={max_tx} violations(degree/locality/flood)={}/{}/{}",
            windows.len(),
            violations[0],
            violations[1],
            violations[2]
        ));
        pass &= floods > 0;
    }
    Verdict { pass, detail: parts.join(" | ") }
}

fn criterion_8() -> Verdict {
    let traces = default_traces(1);
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [ScenarioKind::Checkin, ScenarioKind::Review] {
        for mode in OverlayMode::ALL {
            let opts = RunOptions::new(kind, mode, config(1));
            let files: Vec<Vec<u8>> = (0..2)
                .map(|_| {
                    let dir = tempfile::tempdir().expect("tempdir");
                    export(&run(&opts, &traces).expect("run completes"), dir.path()).expect("export");
                    fs::read(dir.path().join("metrics.csv")).expect("metrics.csv")
                })
                .collect();
            let same = files[0] == files[1];
            pass &= same;
            if !same {
                parts.push(format!("{kind}/{mode} differs"));
            }
        }
    }
    Verdict { pass, detail: format!("6 run pairs byte-compared{}", if parts.is_empty() { String::new() } else { format!(": {}", parts.join(", ")) }) }
}

#[test]
fn acceptance() {
    let criteria: [(u32, fn() -> Verdict); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    let mut failed = Vec::new();
    for (n, f) in criteria {
        let v = f();
        report(n, &v);
        if !v.pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
