//! Identifiers, geographic positions and great-circle distance.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by every distance computation, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Global node identifier. The total order is the one bully election uses:
/// the lowest id wins.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Global identifier of a replicated data object.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ObjectId(pub u64);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("invalid bounding box: {0}")]
    BoundingBox(String),
}

/// A point on the sphere in decimal degrees. Construction validates bounds,
/// so every value in circulation is a valid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPosition {
    lat: f64,
    lon: f64,
}

impl GeoPosition {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Point reached by travelling `meters` from `self` along `bearing_deg`
    /// (clockwise from north). Latitude is clamped to the poles and
    /// longitude wrapped into [-180, 180].
    pub fn offset(&self, bearing_deg: f64, meters: f64) -> GeoPosition {
        let delta = meters / EARTH_RADIUS_M;
        let theta = bearing_deg.to_radians();
        let phi1 = self.lat.to_radians();
        let lambda1 = self.lon.to_radians();
        let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos()).asin();
        let lambda2 = lambda1
            + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * phi2.sin());
        let lat = phi2.to_degrees().clamp(-90.0, 90.0);
        let mut lon = lambda2.to_degrees();
        lon = ((lon + 540.0) % 360.0) - 180.0;
        GeoPosition { lat, lon: lon.clamp(-180.0, 180.0) }
    }
}

impl<'de> Deserialize<'de> for GeoPosition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(d)?;
        GeoPosition::new(raw.lat, raw.lon).map_err(serde::de::Error::custom)
    }
}

/// Haversine great-circle distance in meters.
///
/// Symmetric bit-for-bit: the inputs are put in a canonical order before
/// evaluation so `distance(a, b) == distance(b, a)` holds exactly.
pub fn distance(a: GeoPosition, b: GeoPosition) -> f64 {
    let (a, b) = if (a.lat, a.lon) <= (b.lat, b.lon) { (a, b) } else { (b, a) };
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Boundary-inclusive proximity test.
pub fn within(a: GeoPosition, b: GeoPosition, radius: f64) -> bool {
    distance(a, b) <= radius
}

/// Axis-aligned lat/lon rectangle. Lower bounds inclusive, upper bounds
/// exclusive, so a grid of boxes partitions the plane without overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, GeoError> {
        GeoPosition::new(min_lat, min_lon)?;
        GeoPosition::new(max_lat, max_lon)?;
        if min_lat >= max_lat || min_lon >= max_lon {
            return Err(GeoError::BoundingBox(format!(
                "({min_lat}, {min_lon}) is not below-left of ({max_lat}, {max_lon})"
            )));
        }
        Ok(Self { min_lat, min_lon, max_lat, max_lon })
    }

    /// Square box of side `side_m` meters centered on `center`.
    pub fn around(center: GeoPosition, side_m: f64) -> Result<Self, GeoError> {
        let half = side_m / 2.0;
        let north = center.offset(0.0, half).lat();
        let south = center.offset(180.0, half).lat();
        let east = center.offset(90.0, half).lon();
        let west = center.offset(270.0, half).lon();
        Self::new(south, west, north, east)
    }

    pub fn contains(&self, p: GeoPosition) -> bool {
        p.lat >= self.min_lat && p.lat < self.max_lat && p.lon >= self.min_lon && p.lon < self.max_lon
    }

    pub fn center(&self) -> GeoPosition {
        GeoPosition {
            lat: (self.min_lat + self.max_lat) / 2.0,
            lon: (self.min_lon + self.max_lon) / 2.0,
        }
    }

    /// Clamp a point into the box (upper bounds pulled just inside).
    pub fn clamp(&self, p: GeoPosition) -> GeoPosition {
        let eps = 1e-9;
        GeoPosition {
            lat: p.lat.clamp(self.min_lat, self.max_lat - eps),
            lon: p.lon.clamp(self.min_lon, self.max_lon - eps),
        }
    }

    /// Split into `rows × cols` equal cells, row-major from the south-west.
    pub fn grid(&self, rows: usize, cols: usize) -> Vec<BoundingBox> {
        let dlat = (self.max_lat - self.min_lat) / rows as f64;
        let dlon = (self.max_lon - self.min_lon) / cols as f64;
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let max_lat = if r + 1 == rows { self.max_lat } else { self.min_lat + dlat * (r + 1) as f64 };
                let max_lon = if c + 1 == cols { self.max_lon } else { self.min_lon + dlon * (c + 1) as f64 };
                cells.push(BoundingBox {
                    min_lat: self.min_lat + dlat * r as f64,
                    min_lon: self.min_lon + dlon * c as f64,
                    max_lat,
                    max_lon,
                });
            }
        }
        cells
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(lat: f64, lon: f64) -> GeoPosition {
        GeoPosition::new(lat, lon).unwrap()
    }

    // Reference values from a 30-digit haversine evaluation done outside this crate.
    const PORTO_PAIR_M: f64 = 1_781.477_742_949_232_8;
    #[allow(clippy::excessive_precision)]
    const HALF_EQUATOR_M: f64 = 20_015_086.796_020_572;

    #[test]
    fn identity_is_zero() {
        let x = p(41.1579, -8.6291);
        assert_eq!(distance(x, x), 0.0);
        assert!(within(x, x, 0.0));
    }

    #[test]
    fn porto_pair_matches_reference() {
        let d = distance(p(41.1579, -8.6291), p(41.1496, -8.6109));
        assert!((d - PORTO_PAIR_M).abs() < 1e-6, "{d}");
    }

    #[test]
    fn antipodal_on_equator_is_half_circumference() {
        let d = distance(p(0.0, 0.0), p(0.0, 180.0));
        assert!((d - HALF_EQUATOR_M).abs() < 1.0, "{d}");
        assert!(!within(p(0.0, 0.0), p(0.0, 180.0), 1000.0));
    }

    #[test]
    fn within_boundary_is_inclusive() {
        let a = p(41.1579, -8.6291);
        let b = p(41.1496, -8.6109);
        let d = distance(a, b);
        assert!(within(a, b, d));
        assert!(!within(a, b, d - 1.0));
    }

    #[test]
    fn rejects_out_of_range() {
        assert_eq!(GeoPosition::new(90.5, 0.0), Err(GeoError::Latitude(90.5)));
        assert_eq!(GeoPosition::new(0.0, -180.01), Err(GeoError::Longitude(-180.01)));
        assert!(GeoPosition::new(f64::NAN, 0.0).is_err());
        assert!(serde_json::from_str::<GeoPosition>(r#"{"lat": 91, "lon": 0}"#).is_err());
    }

    #[test]
    fn offset_travels_requested_distance() {
        let a = p(41.15, -8.61);
        for bearing in [0.0, 45.0, 133.0, 270.0] {
            let b = a.offset(bearing, 750.0);
            assert!((distance(a, b) - 750.0).abs() < 1e-3);
        }
    }

    #[test]
    fn grid_partitions_box() {
        let bbox = BoundingBox::new(41.0, -9.0, 42.0, -8.0).unwrap();
        let cells = bbox.grid(2, 3);
        assert_eq!(cells.len(), 6);
        for q in [p(41.0, -9.0), p(41.5, -8.5), p(41.99, -8.01), p(41.2, -8.7)] {
            assert_eq!(cells.iter().filter(|c| c.contains(q)).count(), 1);
        }
    }

    fn arb_pos() -> impl Strategy<Value = GeoPosition> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(la, lo)| p(la, lo))
    }

    proptest! {
        #[test]
        fn symmetric_exactly(a in arb_pos(), b in arb_pos()) {
            prop_assert_eq!(distance(a, b).to_bits(), distance(b, a).to_bits());
            prop_assert!(distance(a, b) >= 0.0);
        }

        #[test]
        fn triangle_inequality(a in arb_pos(), b in arb_pos(), c in arb_pos()) {
            let lhs = distance(a, c);
            let rhs = distance(a, b) + distance(b, c);
            prop_assert!(lhs <= rhs * (1.0 + 1e-6) + 1e-6);
        }

        #[test]
        fn within_monotone_in_radius(a in arb_pos(), b in arb_pos(), r1 in 0.0f64..3e7, extra in 0.0f64..1e7) {
            if within(a, b, r1) {
                prop_assert!(within(a, b, r1 + extra));
            }
        }
    }
}
