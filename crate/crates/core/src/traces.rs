//! Client routes and object placements: CSV ingest, validation and a
//! seeded synthetic generator.
//!
//! Routes CSV: header `client_id,seq,lat,lon[,dwell_ms]`, one row per
//! waypoint, `seq` strictly increasing within a client. Objects CSV:
//! header `object_id,lat,lon,kind` with `kind` one of `counter`, `map`.
//! UTF-8, `.` as decimal separator, numbers parsed with Rust's standard
//! float and integer parsers (round-trip exact).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crdt::CrdtKind;
use crate::geo::{distance, within, BoundingBox, GeoPosition, NodeId, ObjectId};

pub const DEFAULT_DWELL_MS: u64 = 1000;
/// Sanity bound on the distance between consecutive waypoints.
pub const DEFAULT_MAX_HOP_M: f64 = 5000.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: u64, message: String },
    #[error("{path}: file has no data rows")]
    Empty { path: String },
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("infeasible synthesis: {0}")]
    Infeasible(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub client: NodeId,
    pub waypoints: Vec<GeoPosition>,
    /// Time spent at each waypoint before moving to the next.
    pub dwell: Vec<u64>,
}

impl Route {
    pub fn uniform(client: NodeId, waypoints: Vec<GeoPosition>, dwell: u64) -> Self {
        let dwell = vec![dwell; waypoints.len()];
        Self { client, waypoints, dwell }
    }

    /// Position `elapsed` ms after departure; stays at the last waypoint.
    pub fn position_at(&self, elapsed: u64) -> GeoPosition {
        let mut t = 0u64;
        for (p, d) in self.waypoints.iter().zip(&self.dwell) {
            t += d;
            if elapsed < t {
                return *p;
            }
        }
        *self.waypoints.last().expect("validated non-empty")
    }

    /// Time until the last waypoint is reached.
    pub fn duration(&self) -> u64 {
        self.dwell[..self.dwell.len() - 1].iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementKind {
    Counter,
    Map,
}

impl From<PlacementKind> for CrdtKind {
    fn from(k: PlacementKind) -> Self {
        match k {
            PlacementKind::Counter => CrdtKind::Counter,
            PlacementKind::Map => CrdtKind::Map,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPlacement {
    pub object: ObjectId,
    pub pos: GeoPosition,
    pub kind: PlacementKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Traces {
    pub routes: Vec<Route>,
    pub objects: Vec<ObjectPlacement>,
}

#[derive(Deserialize)]
struct RouteRow {
    client_id: u64,
    seq: u64,
    lat: f64,
    lon: f64,
    #[serde(default)]
    dwell_ms: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct ObjectRow {
    object_id: u64,
    lat: f64,
    lon: f64,
    kind: PlacementKind,
}

fn open(path: &Path) -> Result<csv::Reader<File>, TraceError> {
    let f = File::open(path).map_err(|source| TraceError::Io { path: path.display().to_string(), source })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn parse_err(path: &Path, e: &csv::Error, fallback_line: u64) -> TraceError {
    let line = e.position().map(|p| p.line()).unwrap_or(fallback_line);
    let message = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        _ => e.to_string(),
    };
    TraceError::Parse { path: path.display().to_string(), line, message }
}

/// Per-client (seqs, waypoints, dwell times) while loading.
type RouteRows = BTreeMap<NodeId, (Vec<u64>, Vec<GeoPosition>, Vec<u64>)>;

/// Load and validate routes. Clients keep the order of first appearance.
pub fn load_routes(path: &Path) -> Result<Vec<Route>, TraceError> {
    let mut rdr = open(path)?;
    let mut order: Vec<NodeId> = Vec::new();
    let mut rows: RouteRows = BTreeMap::new();
    let pstr = || path.display().to_string();
    for (i, rec) in rdr.deserialize::<RouteRow>().enumerate() {
        let row = rec.map_err(|e| parse_err(path, &e, i as u64 + 2))?;
        let line = i as u64 + 2;
        let pos = GeoPosition::new(row.lat, row.lon)
            .map_err(|e| TraceError::Parse { path: pstr(), line, message: e.to_string() })?;
        let id = NodeId(row.client_id);
        let entry = rows.entry(id).or_insert_with(|| {
            order.push(id);
            Default::default()
        });
        if entry.0.last().is_some_and(|&s| s >= row.seq) {
            return Err(TraceError::Parse {
                path: pstr(),
                line,
                message: format!("seq {} of client {} is not increasing", row.seq, row.client_id),
            });
        }
        entry.0.push(row.seq);
        entry.1.push(pos);
        entry.2.push(row.dwell_ms.unwrap_or(DEFAULT_DWELL_MS));
    }
    if order.is_empty() {
        return Err(TraceError::Empty { path: pstr() });
    }
    let routes: Vec<Route> = order
        .into_iter()
        .map(|id| {
            let (_, waypoints, dwell) = rows.remove(&id).expect("recorded");
            Route { client: id, waypoints, dwell }
        })
        .collect();
    for r in &routes {
        validate_route(r, DEFAULT_MAX_HOP_M)?;
    }
    Ok(routes)
}

pub fn load_objects(path: &Path) -> Result<Vec<ObjectPlacement>, TraceError> {
    let mut rdr = open(path)?;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, rec) in rdr.deserialize::<ObjectRow>().enumerate() {
        let line = i as u64 + 2;
        let row = rec.map_err(|e| parse_err(path, &e, line))?;
        let pos = GeoPosition::new(row.lat, row.lon).map_err(|e| TraceError::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        if !ids.insert(row.object_id) {
            return Err(TraceError::Parse {
                path: path.display().to_string(),
                line,
                message: format!("duplicate object id {}", row.object_id),
            });
        }
        out.push(ObjectPlacement { object: ObjectId(row.object_id), pos, kind: row.kind });
    }
    if out.is_empty() {
        return Err(TraceError::Empty { path: path.display().to_string() });
    }
    Ok(out)
}

pub fn validate_route(r: &Route, max_hop: f64) -> Result<(), TraceError> {
    if r.waypoints.len() < 2 {
        return Err(TraceError::Invalid(format!("route of {} has {} waypoint(s), need at least 2", r.client, r.waypoints.len())));
    }
    if r.dwell.len() != r.waypoints.len() {
        return Err(TraceError::Invalid(format!("route of {}: dwell and waypoint counts differ", r.client)));
    }
    for (i, w) in r.waypoints.windows(2).enumerate() {
        let d = distance(w[0], w[1]);
        if d > max_hop {
            return Err(TraceError::Invalid(format!(
                "route of {}: hop {}→{} spans {:.0} m, above the {:.0} m bound",
                r.client,
                i,
                i + 1,
                d,
                max_hop
            )));
        }
    }
    Ok(())
}

impl Traces {
    pub fn load(routes: &Path, objects: &Path) -> Result<Self, TraceError> {
        let t = Traces { routes: load_routes(routes)?, objects: load_objects(objects)? };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.routes.is_empty() {
            return Err(TraceError::Invalid("no routes".into()));
        }
        let mut clients = BTreeSet::new();
        for r in &self.routes {
            validate_route(r, DEFAULT_MAX_HOP_M)?;
            if !clients.insert(r.client) {
                return Err(TraceError::Invalid(format!("client {} has two routes", r.client)));
            }
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.object) {
                return Err(TraceError::Invalid(format!("duplicate object id {}", o.object)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), TraceError> {
        let io = |path: &Path, e: std::io::Error| TraceError::Io { path: path.display().to_string(), source: e };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let rp = dir.join("routes.csv");
        let mut w = csv::Writer::from_path(&rp).map_err(|e| io(&rp, e.into()))?;
        w.write_record(["client_id", "seq", "lat", "lon", "dwell_ms"]).map_err(|e| io(&rp, e.into()))?;
        for r in &self.routes {
            for (i, (p, d)) in r.waypoints.iter().zip(&r.dwell).enumerate() {
                w.write_record([
                    r.client.0.to_string(),
                    i.to_string(),
                    p.lat().to_string(),
                    p.lon().to_string(),
                    d.to_string(),
                ])
                .map_err(|e| io(&rp, e.into()))?;
            }
        }
        w.flush().map_err(|e| io(&rp, e))?;
        let op = dir.join("objects.csv");
        let mut w = csv::Writer::from_path(&op).map_err(|e| io(&op, e.into()))?;
        for o in &self.objects {
            w.serialize(ObjectRow { object_id: o.object.0, lat: o.pos.lat(), lon: o.pos.lon(), kind: o.kind })
                .map_err(|e| io(&op, e.into()))?;
        }
        w.flush().map_err(|e| io(&op, e))?;
        Ok(())
    }

    /// Every client pair is within `max_distance` at some common waypoint
    /// index.
    pub fn pairs_meet(&self, max_distance: f64) -> bool {
        let rs = &self.routes;
        (0..rs.len()).all(|a| {
            (a + 1..rs.len()).all(|b| {
                rs[a].waypoints.iter().zip(&rs[b].waypoints).any(|(p, q)| within(*p, *q, max_distance))
            })
        })
    }

    /// Routes passing within `radius` of object `o`.
    pub fn routes_near(&self, o: &ObjectPlacement, radius: f64) -> Vec<NodeId> {
        self.routes
            .iter()
            .filter(|r| r.waypoints.iter().any(|w| within(*w, o.pos, radius)))
            .map(|r| r.client)
            .collect()
    }

    /// Every route passes within `radius` of at least one object it shares
    /// with another route (skipped for a single client) and at least one
    /// object no other route comes near.
    pub fn coverage_ok(&self, radius: f64) -> bool {
        let near: Vec<Vec<NodeId>> = self.objects.iter().map(|o| self.routes_near(o, radius)).collect();
        self.routes.iter().all(|r| {
            let shared = self.routes.len() == 1
                || near.iter().any(|n| n.len() >= 2 && n.contains(&r.client));
            let exclusive = near.iter().any(|n| n.len() == 1 && n[0] == r.client);
            shared && exclusive
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub seed: u64,
    pub clients: usize,
    pub waypoints: usize,
    pub objects: usize,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Side of the square bounding box, meters.
    pub bbox_side: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub dwell_ms: u64,
    pub max_distance: f64,
    pub interest_radius: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 42,
            clients: 5,
            waypoints: 40,
            objects: 50,
            center_lat: 41.1579,
            center_lon: -8.6291,
            bbox_side: 12_000.0,
            step_min: 100.0,
            step_max: 250.0,
            dwell_ms: DEFAULT_DWELL_MS,
            max_distance: 1000.0,
            interest_radius: 1000.0,
        }
    }
}

impl SynthParams {
    pub fn bbox(&self) -> Result<BoundingBox, TraceError> {
        let c = GeoPosition::new(self.center_lat, self.center_lon).map_err(|e| TraceError::Infeasible(e.to_string()))?;
        BoundingBox::around(c, self.bbox_side).map_err(|e| TraceError::Infeasible(e.to_string()))
    }
}

/// Random-walk routes through a common hub plus object placements.
///
/// Every route crosses the bounding-box centre at the same waypoint
/// index, so all pairs meet. Each client walks out along its own
/// heading on both sides of the hub, which keeps the far ends of the
/// routes apart; the first objects sit near the hub (shared), then one
/// object per client at the point of its route farthest from all other
/// routes (exclusive), the rest near random waypoints.
pub fn synthesize(p: &SynthParams) -> Result<Traces, TraceError> {
    if p.clients == 0 || p.waypoints < 2 || p.objects == 0 {
        return Err(TraceError::Infeasible("need at least 1 client, 2 waypoints and 1 object".into()));
    }
    if p.step_min <= 0.0 || p.step_max < p.step_min || p.step_max > DEFAULT_MAX_HOP_M {
        return Err(TraceError::Infeasible(format!("step range [{}, {}] m is not usable", p.step_min, p.step_max)));
    }
    let need = p.clients + usize::from(p.clients > 1);
    if p.objects < need {
        return Err(TraceError::Infeasible(format!(
            "{} objects cannot give {} clients one exclusive object each plus a shared one; use --objects {need} or more",
            p.objects, p.clients
        )));
    }
    let bbox = p.bbox()?;
    let hub = bbox.center();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let meet = p.waypoints / 2;
    let n = p.clients as f64;

    let mut routes = Vec::with_capacity(p.clients);
    for c in 0..p.clients {
        let heading = 360.0 * c as f64 / n + rng.gen_range(-10.0..10.0);
        // Opposite direction, nudged half a sector when that would land on
        // another client's heading.
        let nudge = if p.clients.is_multiple_of(2) { 180.0 / n } else { 0.0 };
        let back_heading = heading + 180.0 + nudge;
        let mut wps = vec![hub; p.waypoints];
        wps[meet] = hub.offset(rng.gen_range(0.0..360.0), rng.gen_range(0.0..50.0));
        for i in (0..meet).rev() {
            wps[i] = step(&mut rng, wps[i + 1], back_heading, p, &bbox);
        }
        for i in meet + 1..p.waypoints {
            wps[i] = step(&mut rng, wps[i - 1], heading, p, &bbox);
        }
        routes.push(Route::uniform(NodeId(c as u64 + 1), wps, p.dwell_ms));
    }

    let mut objects = Vec::with_capacity(p.objects);
    let mut next_id = 1u64;
    let mut place = |objects: &mut Vec<ObjectPlacement>, pos: GeoPosition| {
        objects.push(ObjectPlacement { object: ObjectId(next_id), pos, kind: PlacementKind::Counter });
        next_id += 1;
    };

    let shared = if p.clients > 1 { (p.objects / 5).max(1) } else { 0 };
    for _ in 0..shared {
        let pos = hub.offset(rng.gen_range(0.0..360.0), rng.gen_range(0.0..p.interest_radius / 2.0));
        place(&mut objects, pos);
    }
    for r in &routes {
        let (best, gap) = r
            .waypoints
            .iter()
            .map(|w| {
                let gap = routes
                    .iter()
                    .filter(|o| o.client != r.client)
                    .flat_map(|o| o.waypoints.iter())
                    .map(|q| distance(*w, *q))
                    .fold(f64::INFINITY, f64::min);
                (*w, gap)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("validated non-empty");
        if gap <= p.interest_radius {
            return Err(TraceError::Infeasible(format!(
                "route of {} never gets more than {:.0} m from the others, so no object can be exclusive to it; \
                 raise --waypoints or the step length, or lower the interest radius",
                r.client, gap
            )));
        }
        place(&mut objects, best);
    }
    while objects.len() < p.objects {
        let r = &routes[rng.gen_range(0..routes.len())];
        let w = r.waypoints[rng.gen_range(0..r.waypoints.len())];
        let pos = bbox.clamp(w.offset(rng.gen_range(0.0..360.0), rng.gen_range(0.0..2.0 * p.interest_radius)));
        place(&mut objects, pos);
    }

    let t = Traces { routes, objects };
    t.validate()?;
    if !t.pairs_meet(p.max_distance) {
        return Err(TraceError::Infeasible("some client pair never meets; shrink the step range".into()));
    }
    if !t.coverage_ok(p.interest_radius) {
        return Err(TraceError::Infeasible(
            "extra objects broke exclusivity of a route's only exclusive object; raise --bbox-side or lower --objects"
                .into(),
        ));
    }
    Ok(t)
}

fn step(rng: &mut ChaCha8Rng, from: GeoPosition, heading: f64, p: &SynthParams, bbox: &BoundingBox) -> GeoPosition {
    let bearing = heading + rng.gen_range(-35.0..35.0);
    let len = rng.gen_range(p.step_min..=p.step_max);
    let next = from.offset(bearing, len);
    if bbox.contains(next) {
        next
    } else {
        bbox.clamp(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn default_synth_satisfies_post_checks() {
        for seed in [1, 2, 3, 42] {
            let t = synthesize(&SynthParams { seed, ..Default::default() }).unwrap();
            assert_eq!(t.routes.len(), 5);
            assert!(t.routes.iter().all(|r| r.waypoints.len() == 40));
            assert_eq!(t.objects.len(), 50);
            assert!(t.pairs_meet(1000.0));
            assert!(t.coverage_ok(1000.0));
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let p = SynthParams::default();
        assert_eq!(synthesize(&p).unwrap(), synthesize(&p).unwrap());
        assert_ne!(synthesize(&p).unwrap(), synthesize(&SynthParams { seed: 7, ..p }).unwrap());
    }

    #[test]
    fn single_client_needs_no_overlap() {
        let t = synthesize(&SynthParams { clients: 1, objects: 3, ..Default::default() }).unwrap();
        assert_eq!(t.routes.len(), 1);
        assert!(t.coverage_ok(1000.0));
    }

    #[test]
    fn infeasible_is_reported() {
        let e = synthesize(&SynthParams { objects: 3, ..Default::default() }).unwrap_err();
        assert!(matches!(e, TraceError::Infeasible(_)));
        let e = synthesize(&SynthParams { waypoints: 4, ..Default::default() }).unwrap_err();
        assert!(matches!(e, TraceError::Infeasible(_)), "{e}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = synthesize(&SynthParams::default()).unwrap();
        t.save(dir.path()).unwrap();
        let back = Traces::load(&dir.path().join("routes.csv"), &dir.path().join("objects.csv")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn five_by_forty_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("client_id,seq,lat,lon\n");
        for c in [9, 3, 5, 1, 7] {
            for s in 0..40 {
                body += &format!("{c},{s},{},{}\n", 41.15 + s as f64 * 1e-3, -8.61);
            }
        }
        let routes = load_routes(&write(dir.path(), "r.csv", &body)).unwrap();
        assert_eq!(routes.len(), 5);
        assert_eq!(routes.iter().map(|r| r.client.0).collect::<Vec<_>>(), vec![9, 3, 5, 1, 7]);
        assert!(routes.iter().all(|r| r.waypoints.len() == 40 && r.dwell[0] == DEFAULT_DWELL_MS));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = load_routes(&write(dir.path(), "r.csv", "client_id,seq,lat,lon\n")).unwrap_err();
        assert!(matches!(e, TraceError::Empty { .. }));
    }

    #[test]
    fn malformed_lat_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", "client_id,seq,lat,lon\n1,0,41.1,-8.6\n1,1,4x.1,-8.6\n");
        match load_routes(&p).unwrap_err() {
            TraceError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        let p = write(dir.path(), "r2.csv", "client_id,seq,lat,lon\n1,0,41.1,-8.6\n1,1,91.0,-8.6\n");
        match load_routes(&p).unwrap_err() {
            TraceError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("latitude"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn short_route_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", "client_id,seq,lat,lon\n1,0,41.1,-8.6\n");
        assert!(matches!(load_routes(&p).unwrap_err(), TraceError::Invalid(_)));
    }

    #[test]
    fn objects_parse_and_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "o.csv", "object_id,lat,lon,kind\n1,41.1,-8.6,counter\n2,41.2,-8.6,map\n");
        let os = load_objects(&p).unwrap();
        assert_eq!(os[1].kind, PlacementKind::Map);
        let p = write(dir.path(), "o2.csv", "object_id,lat,lon,kind\n1,41.1,-8.6,counter\n1,41.2,-8.6,map\n");
        assert!(matches!(load_objects(&p).unwrap_err(), TraceError::Parse { line: 3, .. }));
        let p = write(dir.path(), "o3.csv", "object_id,lat,lon,kind\n1,41.1,-8.6,set\n");
        assert!(matches!(load_objects(&p).unwrap_err(), TraceError::Parse { line: 2, .. }));
    }

    #[test]
    fn position_follows_dwell() {
        let a = GeoPosition::new(41.0, -8.0).unwrap();
        let b = GeoPosition::new(41.001, -8.0).unwrap();
        let r = Route { client: NodeId(1), waypoints: vec![a, b], dwell: vec![500, 1000] };
        assert_eq!(r.position_at(0), a);
        assert_eq!(r.position_at(499), a);
        assert_eq!(r.position_at(500), b);
        assert_eq!(r.position_at(1_000_000), b);
        assert_eq!(r.duration(), 500);
    }
}
